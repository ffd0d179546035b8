use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    add_positions, BlockDims, ConvProjection, Decoder, Encoder, Init, Linear, RegressionHead,
};
use crate::autograd::{Tape, Var};
use crate::datamodel::{Batch, Modality, ModalityDims};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::protocols::Head;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Uniform fused dimension `d`.
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers per encoder/decoder stack.
    pub depth: usize,
    /// Hidden width of the regression heads.
    pub d_hid: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub input_dims: ModalityDims,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            depth: 2,
            d_hid: 128,
            d_ff: 128,
            conv_kernel: 3,
            input_dims: ModalityDims::default(),
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("depth", self.depth),
            ("d_hid", self.d_hid),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd to preserve sequence length",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.input_dims.validate()
    }

    fn block(&self) -> BlockDims {
        BlockDims {
            d: self.d_model,
            heads: self.n_heads,
            depth: self.depth,
            d_ff: self.d_ff,
        }
    }
}

/// A unit of computation reported by [`FusionNet::forward_routed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Project(Modality),
    TeacherDecoder(Modality),
    TeacherFuse,
    StudentIntra(Modality),
    StudentPair(Head),
    Regress(Head),
}

/// Output of the teacher's trinary fusion.
#[derive(Debug, Clone, Copy)]
pub struct TeacherFusion {
    /// `[f̂_l ⊕ f̂_a ⊕ f̂_v]`, shape `[B, 3d]`.
    pub fused: Var,
    /// `[B, d]`
    pub h_t: Var,
}

/// All seven representations and predictions for a complete batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, d]` per head, indexed by [`Head::index`].
    pub reps: [Var; 7],
    /// `[B, 1]` per head.
    pub preds: [Var; 7],
    /// Teacher decoder head elements `D^v[0]`, `D^a[0]`.
    pub f_v: Var,
    pub f_a: Var,
}

impl ForwardOutput {
    pub fn rep(&self, h: Head) -> Var {
        self.reps[h.index()]
    }

    pub fn pred(&self, h: Head) -> Var {
        self.preds[h.index()]
    }
}

#[derive(Debug, Clone)]
pub struct RoutedOutput {
    pub rep: Var,
    pub pred: Var,
    pub trace: Vec<Block>,
}

#[derive(Debug, Clone)]
struct Teacher {
    decoder_v: Decoder,
    decoder_a: Decoder,
    cls_v: crate::params::ParamId,
    cls_a: crate::params::ParamId,
    fuse: Encoder,
    projector: Linear,
}

#[derive(Debug, Clone)]
struct Student {
    intra_v: Encoder,
    intra_a: Encoder,
    cls_v: crate::params::ParamId,
    cls_a: crate::params::ParamId,
    /// `la, lv, av`
    pairs: [Encoder; 3],
    projectors: [Linear; 3],
}

/// Teacher and six students over one shared set of conv projections.
#[derive(Debug, Clone)]
pub struct FusionNet<F> {
    config: ModelConfig,
    pub params: Params<F>,
    proj: [ConvProjection; 3],
    teacher: Teacher,
    student: Student,
    heads: [RegressionHead; 7],
}

fn pair_slot(h: Head) -> Option<(usize, Modality, Modality)> {
    match h {
        Head::La => Some((0, Modality::L, Modality::A)),
        Head::Lv => Some((1, Modality::L, Modality::V)),
        Head::Av => Some((2, Modality::A, Modality::V)),
        _ => None,
    }
}

/// `[false] ++ pad` per row: the prepended CLS slot is always attendable.
fn cls_pad(pad: &[bool], batch: usize) -> Vec<bool> {
    let t = pad.len() / batch;
    let mut out = Vec::with_capacity(batch * (t + 1));
    for row in pad.chunks(t.max(1)).take(batch) {
        out.push(false);
        out.extend_from_slice(row);
    }
    out
}

impl<F: Real> FusionNet<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        let d = config.d_model;
        let dims = config.block();
        let proj = Modality::ALL.map(|m| {
            init.conv(
                &format!("proj.{m}"),
                config.conv_kernel,
                config.input_dims.get(m),
                d,
            )
        });
        let teacher = Teacher {
            decoder_v: init.decoder("teacher.decoder_v", dims),
            decoder_a: init.decoder("teacher.decoder_a", dims),
            cls_v: init.embedding("teacher.decoder_v.cls", d),
            cls_a: init.embedding("teacher.decoder_a.cls", d),
            fuse: init.encoder("teacher.fuse", dims),
            projector: init.linear("teacher.projector", 3 * d, d),
        };
        let student = Student {
            intra_v: init.encoder("student.intra_v", dims),
            intra_a: init.encoder("student.intra_a", dims),
            cls_v: init.embedding("student.intra_v.cls", d),
            cls_a: init.embedding("student.intra_a.cls", d),
            pairs: ["la", "lv", "av"].map(|p| init.encoder(&format!("student.pair_{p}"), dims)),
            projectors: ["la", "lv", "av"]
                .map(|p| init.linear(&format!("student.proj_{p}"), 2 * d, d)),
        };
        let heads = Head::ALL.map(|h| init.head(&format!("heads.{h}"), d, config.d_hid));
        Ok(Self {
            config,
            params,
            proj,
            teacher,
            student,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn dropout(&self, tape: &Tape<F>) -> f64 {
        if tape.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    fn check_dims(&self, batch: &Batch<F>) -> Result<()> {
        if batch.dims != self.config.input_dims {
            return Err(Error::Shape(format!(
                "batch dims {} do not match model input dims {}",
                batch.dims, self.config.input_dims
            )));
        }
        Ok(())
    }

    /// `X̄^m = conv_m(X^m)`, shape `[B, T_m, d]`.
    pub fn project(&self, tape: &mut Tape<F>, batch: &Batch<F>, m: Modality) -> Result<Var> {
        self.check_dims(batch)?;
        let x = tape.constant(batch.features(m).clone());
        Ok(self.project_var(tape, x, m))
    }

    /// Projection of an already-taped `[B, T, d^m]` input.
    pub fn project_var(&self, tape: &mut Tape<F>, x: Var, m: Modality) -> Var {
        self.proj[m.index()].forward(tape, &self.params, x)
    }

    /// `D^m = decoder_m(X̄^l, [m_cls] + X̄^m)` for `m ∈ {v, a}`; output length `T_m + 1`.
    pub fn teacher_binary_fuse(
        &self,
        tape: &mut Tape<F>,
        xl: Var,
        l_pad: &[bool],
        xm: Var,
        m_pad: &[bool],
        m: Modality,
    ) -> Result<Var> {
        let (decoder, cls) = match m {
            Modality::V => (&self.teacher.decoder_v, self.teacher.cls_v),
            Modality::A => (&self.teacher.decoder_a, self.teacher.cls_a),
            Modality::L => {
                return Err(Error::Shape(
                    "binary fusion targets are visual or acoustic".into(),
                ))
            }
        };
        let b = tape.shape(xm)[0];
        let cls = tape.param(&self.params, cls);
        let target = tape.prepend_token(cls, xm);
        let target = add_positions(tape, target);
        let target_pad = cls_pad(m_pad, b);
        let dropout = self.dropout(tape);
        Ok(decoder.forward(
            tape,
            &self.params,
            xl,
            l_pad,
            target,
            &target_pad,
            dropout,
        ))
    }

    /// Stacks `[X̄^l[0], D^a[0], D^v[0]]`, encodes, concatenates and projects to `h^t`.
    pub fn teacher_trinary_fuse(
        &self,
        tape: &mut Tape<F>,
        xl: Var,
        dv: Var,
        da: Var,
    ) -> TeacherFusion {
        let f_l = tape.select_token(xl, 0);
        let f_a = tape.select_token(da, 0);
        let f_v = tape.select_token(dv, 0);
        self.teacher_fuse_heads(tape, f_l, f_a, f_v)
    }

    fn teacher_fuse_heads(&self, tape: &mut Tape<F>, f_l: Var, f_a: Var, f_v: Var) -> TeacherFusion {
        let b = tape.shape(f_l)[0];
        let d = self.config.d_model;
        let stacked = tape.stack_tokens(&[f_l, f_a, f_v]);
        let dropout = self.dropout(tape);
        let enc = self
            .teacher
            .fuse
            .forward(tape, &self.params, stacked, None, dropout);
        let fused = tape.reshape(enc, vec![b, 3 * d]);
        let h_t = self.teacher.projector.forward(tape, &self.params, fused);
        TeacherFusion { fused, h_t }
    }

    /// `S^m = encoder^s_m([m_cls] + X̄^m)` for `v`/`a`; `S^l = X̄^l`.
    pub fn student_intra_fuse(
        &self,
        tape: &mut Tape<F>,
        xm: Var,
        pad: &[bool],
        m: Modality,
    ) -> Var {
        let (encoder, cls) = match m {
            Modality::L => return xm,
            Modality::V => (&self.student.intra_v, self.student.cls_v),
            Modality::A => (&self.student.intra_a, self.student.cls_a),
        };
        let b = tape.shape(xm)[0];
        let cls = tape.param(&self.params, cls);
        let x = tape.prepend_token(cls, xm);
        let x = add_positions(tape, x);
        let pad = cls_pad(pad, b);
        let dropout = self.dropout(tape);
        encoder.forward(tape, &self.params, x, Some(&pad), dropout)
    }

    /// Fuses two head elements `[B, d]` into `h^{m1 m2}` for a bi-modal head.
    pub fn student_bimodal_fuse(
        &self,
        tape: &mut Tape<F>,
        first: Var,
        second: Var,
        pair: Head,
    ) -> Result<Var> {
        let (slot, _, _) = pair_slot(pair)
            .ok_or_else(|| Error::UnknownHead(format!("{pair} is not a bi-modal head")))?;
        let b = tape.shape(first)[0];
        let d = self.config.d_model;
        let stacked = tape.stack_tokens(&[first, second]);
        let dropout = self.dropout(tape);
        let enc = self.student.pairs[slot].forward(tape, &self.params, stacked, None, dropout);
        let cat = tape.reshape(enc, vec![b, 2 * d]);
        Ok(self.student.projectors[slot].forward(tape, &self.params, cat))
    }

    /// `h^m = S^m[0]`
    pub fn uni_reps(&self, tape: &mut Tape<F>, s: [Var; 3]) -> [Var; 3] {
        s.map(|x| tape.select_token(x, 0))
    }

    pub fn regress(&self, tape: &mut Tape<F>, h: Var, head: Head) -> Var {
        self.heads[head.index()].forward(tape, &self.params, h)
    }

    /// Regression by head name, for callers holding a string id.
    pub fn regress_named(&self, tape: &mut Tape<F>, h: Var, head: &str) -> Result<Var> {
        let head: Head = head.parse()?;
        Ok(self.regress(tape, h, head))
    }

    /// Training path: all seven representations from a complete batch.
    pub fn forward_all(&self, tape: &mut Tape<F>, batch: &Batch<F>) -> Result<ForwardOutput> {
        self.check_dims(batch)?;
        if let Some(i) = batch.availability.iter().position(|m| !m.is_complete()) {
            return Err(Error::Mask(format!(
                "forward_all needs complete samples; row {i} is masked"
            )));
        }
        let xs = Modality::ALL.map(|m| {
            let x = tape.constant(batch.features(m).clone());
            self.project_var(tape, x, m)
        });
        self.forward_projected(tape, batch, xs)
    }

    /// [`Self::forward_all`] from already projected sequences.
    pub fn forward_projected(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch<F>,
        xs: [Var; 3],
    ) -> Result<ForwardOutput> {
        let [xl, xv, xa] = xs;
        let (pl, pv, pa) = (
            batch.pad_mask(Modality::L),
            batch.pad_mask(Modality::V),
            batch.pad_mask(Modality::A),
        );
        let dv = self.teacher_binary_fuse(tape, xl, pl, xv, pv, Modality::V)?;
        let da = self.teacher_binary_fuse(tape, xl, pl, xa, pa, Modality::A)?;
        let f_l = tape.select_token(xl, 0);
        let f_a = tape.select_token(da, 0);
        let f_v = tape.select_token(dv, 0);
        let teacher = self.teacher_fuse_heads(tape, f_l, f_a, f_v);

        let sv = self.student_intra_fuse(tape, xv, pv, Modality::V);
        let sa = self.student_intra_fuse(tape, xa, pa, Modality::A);
        let [_, h_v, h_a] = self.uni_reps(tape, [xl, sv, sa]);
        // h^l = S^l[0] = X̄^l[0], already extracted as f_l.
        let h_l = f_l;
        let h_la = self.student_bimodal_fuse(tape, h_l, h_a, Head::La)?;
        let h_lv = self.student_bimodal_fuse(tape, h_l, h_v, Head::Lv)?;
        let h_av = self.student_bimodal_fuse(tape, h_a, h_v, Head::Av)?;

        let reps = [teacher.h_t, h_la, h_lv, h_av, h_l, h_a, h_v];
        let preds = Head::ALL.map(|h| self.regress(tape, reps[h.index()], h));
        Ok(ForwardOutput {
            reps,
            preds,
            f_v,
            f_a,
        })
    }

    /// Evaluation path for rows that all share the availability `head.mask()`.
    /// Only the blocks in the returned trace touch the tape; unavailable
    /// modalities are never read.
    pub fn forward_routed(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch<F>,
        head: Head,
    ) -> Result<RoutedOutput> {
        self.check_dims(batch)?;
        let need = head.mask();
        if let Some(i) = batch.availability.iter().position(|&a| {
            need.modalities().any(|m| !a.contains(m))
        }) {
            return Err(Error::Mask(format!(
                "row {i} lacks modalities required by head {head}"
            )));
        }
        let mut trace = Vec::new();
        let mut projected: [Option<Var>; 3] = [None; 3];
        for m in need.modalities() {
            trace.push(Block::Project(m));
            let x = tape.constant(batch.features(m).clone());
            projected[m.index()] = Some(self.project_var(tape, x, m));
        }
        let x = |m: Modality| projected[m.index()].expect("projected");
        let rep = match head {
            Head::T => {
                let (l, v, a) = (Modality::L, Modality::V, Modality::A);
                trace.push(Block::TeacherDecoder(v));
                let dv = self.teacher_binary_fuse(
                    tape,
                    x(l),
                    batch.pad_mask(l),
                    x(v),
                    batch.pad_mask(v),
                    v,
                )?;
                trace.push(Block::TeacherDecoder(a));
                let da = self.teacher_binary_fuse(
                    tape,
                    x(l),
                    batch.pad_mask(l),
                    x(a),
                    batch.pad_mask(a),
                    a,
                )?;
                trace.push(Block::TeacherFuse);
                self.teacher_trinary_fuse(tape, x(l), dv, da).h_t
            }
            Head::L => tape.select_token(x(Modality::L), 0),
            Head::V | Head::A => {
                let m = if head == Head::V { Modality::V } else { Modality::A };
                trace.push(Block::StudentIntra(m));
                let s = self.student_intra_fuse(tape, x(m), batch.pad_mask(m), m);
                tape.select_token(s, 0)
            }
            Head::La | Head::Lv | Head::Av => {
                let (_, m1, m2) = pair_slot(head).expect("bi-modal");
                let mut heads = [None; 2];
                for (slot, m) in [m1, m2].into_iter().enumerate() {
                    let s = if m == Modality::L {
                        x(m)
                    } else {
                        trace.push(Block::StudentIntra(m));
                        self.student_intra_fuse(tape, x(m), batch.pad_mask(m), m)
                    };
                    heads[slot] = Some(tape.select_token(s, 0));
                }
                trace.push(Block::StudentPair(head));
                self.student_bimodal_fuse(tape, heads[0].unwrap(), heads[1].unwrap(), head)?
            }
        };
        trace.push(Block::Regress(head));
        let pred = self.regress(tape, rep, head);
        Ok(RoutedOutput { rep, pred, trace })
    }

    /// Parameter paths belonging to the teacher-only fusion path.
    pub fn is_teacher_param(name: &str) -> bool {
        name.starts_with("teacher.") || name.starts_with("heads.t.")
    }
}
