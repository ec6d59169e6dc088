//! Saves a two-link checkpoint chain, reloads it bit for bit and shows that a
//! corrupted blob is refused.

use std::collections::BTreeMap;

use layerdistill::checkpoint::{self, Stage};
use layerdistill::config::toy;
use layerdistill::transformer::TransformerModel;

fn main() -> layerdistill::Result<()> {
    let dir = std::env::temp_dir().join("layerdistill-checkpoint-example");
    let model = TransformerModel::new(toy(40).student)?;
    let root = checkpoint::save(dir.join("init"), &model, Stage::Init, None, &BTreeMap::new())?;
    let metrics = BTreeMap::from([("dev_accuracy".to_string(), 0.5)]);
    checkpoint::save(dir.join("general"), &model, Stage::General, Some(&root.lineage), &metrics)?;

    let (loaded, info) = checkpoint::load(dir.join("general"))?;
    let same = loaded.named_params().iter().zip(model.named_params()).all(|((_, a), (_, b))| a.data() == b.data());
    println!("{}", info.summary());
    println!("bit-exact reload: {same}");
    let chain = checkpoint::verify_chain(&[dir.join("general"), dir.join("init")])?;
    println!("chain of {} verified", chain.len());

    let blob = dir.join("general").join(checkpoint::WEIGHTS);
    let mut bytes = std::fs::read(&blob)?;
    bytes[100] ^= 1;
    std::fs::write(&blob, bytes)?;
    match checkpoint::inspect(dir.join("general")) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted blob: {e}"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
