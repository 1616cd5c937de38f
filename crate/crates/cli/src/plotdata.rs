//! Tidy per-panel files from an episode CSV.

use std::fs;
use std::path::Path;

use droopguard::log::read_episode_csv;

use crate::{io_err, Failure};

const PANELS: [(&str, &[&str]); 4] = [
    ("voltage.csv", &["step", "v"]),
    ("oscillation.csv", &["step", "y"]),
    ("action.csv", &["step", "translation", "slope", "translation_adv", "slope_adv"]),
    (
        "reward.csv",
        &["step", "component_y", "component_oa", "component_init", "component_pset_pmax", "total_reward"],
    ),
];

pub fn run(episode: &Path, out: &Path, every: usize) -> Result<(), Failure> {
    if every == 0 {
        return Err(Failure::Usage("--every must be at least 1".into()));
    }
    // read and validate everything before touching the output directory
    let rows = read_episode_csv(episode)?;
    let kept: Vec<_> = rows.iter().step_by(every).collect();
    let mut files = Vec::new();
    for (name, cols) in PANELS {
        let mut text = cols.join(",") + "\n";
        for r in &kept {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| match *c {
                    "step" => r.step.to_string(),
                    "v" => r.v.to_string(),
                    "y" => r.y.to_string(),
                    "translation" => r.translation.to_string(),
                    "slope" => r.slope.to_string(),
                    "translation_adv" => r.translation_adv.to_string(),
                    "slope_adv" => r.slope_adv.to_string(),
                    "component_y" => r.component_y.to_string(),
                    "component_oa" => r.component_oa.to_string(),
                    "component_init" => r.component_init.to_string(),
                    "component_pset_pmax" => r.component_pset_pmax.to_string(),
                    _ => r.total_reward.to_string(),
                })
                .collect();
            text += &vals.join(",");
            text.push('\n');
        }
        files.push((name, text));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (name, text) in files {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    println!("{} rows into {}", kept.len(), out.display());
    Ok(())
}
