//! Extract a subnet from a supernet, save both to checkpoints, reload them and
//! confirm the forwards agree.
//!
//! ```text
//! cargo run --example extract_and_persist -- [SUBNET_SPEC]
//! ```

use ofat::distillation::{DistillConfig, TeacherModel};
use ofat::numerics::rng::streams;
use ofat::numerics::Rng;
use ofat::supernet::{
    Checkpoint, CheckpointMeta, Role, SearchSpace, StandaloneModel, SubnetConfig, SubnetRunner,
    SupernetModel,
};
use ofat::training::{init_student, make_synthetic_dataset, Dataset};

fn main() -> ofat::Result<()> {
    let seed = 4;
    let space = SearchSpace::desk_small();
    let spec = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "embed=48,depth=3,heads=4-6-4,ffn=3-4-3".into());
    let config = SubnetConfig::parse_spec(&spec, &space)?;

    let teacher = TeacherModel::build(
        &space,
        &DistillConfig::default().teacher,
        &mut Rng::new(seed, streams::TEACHER),
    )?;
    let supernet = init_student(&space, seed, &teacher)?;
    let sub = supernet.extract_subnet(&config)?;
    println!("{config}: {} parameters incl. frontend", sub.param_count());

    let dir = std::env::temp_dir().join(format!("ofat-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let meta = |role, subnet| CheckpointMeta {
        role,
        space: space.clone(),
        subnet,
        stage: None,
        seed,
        config_digest: None,
        provenance: "extract_and_persist example".into(),
    };
    let super_path = dir.join("supernet.ofat");
    let sub_path = dir.join("subnet.ofat");
    let data_path = dir.join("probe.ofad");
    supernet
        .to_checkpoint(meta(Role::Supernet, None))?
        .save(&super_path)?;
    sub.to_checkpoint(meta(Role::Subnet, Some(config.clone())))?
        .save(&sub_path)?;
    make_synthetic_dataset(seed, 3, 320)?.save(&data_path)?;
    for p in [&super_path, &sub_path, &data_path] {
        println!(
            "wrote {} ({} bytes)",
            p.display(),
            std::fs::metadata(p)?.len()
        );
    }

    let supernet = SupernetModel::from_checkpoint(&Checkpoint::load(&super_path)?)?;
    let sub = StandaloneModel::from_checkpoint(&Checkpoint::load(&sub_path)?)?;
    let data = Dataset::load(&data_path)?;
    println!("subnet checkpoint holds {}", sub.config());
    for (i, s) in data.sequences.iter().enumerate() {
        let a = supernet.forward_raw(&config, s, false)?.head_out;
        let b = sub.forward_raw(s, false)?.head_out;
        println!(
            "sequence {i}: {:?} output, max abs diff {:e}",
            a.shape(),
            a.max_abs_diff(&b)?
        );
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
