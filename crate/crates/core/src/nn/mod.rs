//! Teacher/student fusion network.

pub mod layers;
mod model;

pub use model::{Block, ForwardOutput, FusionNet, ModelConfig, RoutedOutput, TeacherFusion};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads_and_even_kernel() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            conv_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            depth: 0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_groups_present() {
        let net = FusionNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        let names: Vec<&str> = net.params.iter().map(|(_, n, _)| n).collect();
        for prefix in [
            "proj.l.", "proj.v.", "proj.a.",
            "teacher.decoder_v.", "teacher.decoder_a.", "teacher.fuse.", "teacher.projector.",
            "student.intra_v.", "student.intra_a.",
            "student.pair_la.", "student.pair_lv.", "student.pair_av.",
            "student.proj_la.", "student.proj_lv.", "student.proj_av.",
            "heads.t.", "heads.la.", "heads.lv.", "heads.av.", "heads.l.", "heads.a.", "heads.v.",
        ] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
        }
        let cls = names.iter().filter(|n| n.ends_with(".cls")).count();
        assert_eq!(cls, 4);
        assert_eq!(
            net.params.get(net.params.id("heads.v.hidden.weight").unwrap()).shape(),
            [32, 128]
        );
    }
}
