//! One masked-distillation step by hand: teacher targets, a span mask, the
//! student forward on the masked input, the L1 loss and its gradient.
//!
//! ```text
//! cargo run --example masked_distillation
//! ```

use ofat::distillation::{distill_loss, sample_mask, DistillConfig, TeacherModel, TeacherSpec};
use ofat::numerics::rng::streams;
use ofat::numerics::{Graph, Rng};
use ofat::supernet::{SearchSpace, SubnetConfig, SubnetRunner};
use ofat::training::{init_student, make_synthetic_dataset};

fn main() -> ofat::Result<()> {
    let seed = 3;
    let space = SearchSpace::desk_small();
    let distill = DistillConfig {
        k: 2,
        teacher: TeacherSpec {
            embed_dim: space.teacher_dim,
            heads: 4,
            ffn_ratio: 2.0,
            depth: 3,
        },
        ..DistillConfig::default()
    };
    let teacher = TeacherModel::build(
        &space,
        &distill.teacher,
        &mut Rng::new(seed, streams::TEACHER),
    )?;
    let student = init_student(&space, seed, &teacher)?;
    let data = make_synthetic_dataset(seed, 1, 640)?;

    // the student shares the teacher's frozen frontend, so features are computed once
    let features = teacher.frontend(&data.sequences[0])?;
    let targets = teacher.targets_from_features(&features, &distill.target_config())?;
    let mask = sample_mask(
        features.rows(),
        &distill.mask_spec(),
        &mut Rng::new(seed, streams::MASK),
    )?;
    println!(
        "{} frames, {} masked ({:.0}%), targets {:?}",
        features.rows(),
        mask.len(),
        100.0 * mask.len() as f64 / features.rows() as f64,
        targets.shape()
    );

    for preset in ["min", "a_small", "max"] {
        let config = SubnetConfig::preset(preset, &space).unwrap();
        let view = student.view(&config)?;
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let (out, bound) = view.run(&mut g, x, Some(&mask), true)?;
        let loss = distill_loss(&mut g, out.head_out, &targets, &mask, distill.l1_reduction)?;
        g.backward(loss)?;
        let touched = bound
            .leaves
            .iter()
            .filter(|(_, v)| g.grad(*v).is_some())
            .count();
        println!(
            "{preset:<8} loss {:.4}, gradients on {touched} tensors",
            g.value(loss).item()?
        );
    }
    Ok(())
}
