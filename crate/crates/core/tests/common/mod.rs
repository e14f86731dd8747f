//! Fixtures and oracles shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};

use mtl_lab::io::{save_tensor, DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn write_tensor(dir: &Path, name: &str, shape: Vec<usize>, data: Vec<f64>) -> PathBuf {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    save_tensor(&Tensor::new(DType::F64, shape, data).unwrap(), &path).unwrap();
    path
}

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// The N=3, D=2 branch-search affinity: tasks 0 and 1 stay close at both
/// depths, task 2 drifts away at the second.
pub const BRANCH_AFFINITY: [f64; 18] = [
    1.0, 0.9, 0.8, 0.9, 1.0, 0.7, 0.8, 0.7, 1.0, //
    1.0, 0.85, 0.1, 0.85, 1.0, 0.2, 0.1, 0.2, 1.0,
];

/// Writes one input set and config per subcommand into `dir`; returns
/// `(subcommand, config path)` pairs.
pub fn write_all_fixtures(dir: &Path) -> Vec<(&'static str, PathBuf)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let mut config = |name: &'static str, body: String| {
        let p = dir.join(format!("{name}.toml"));
        std::fs::write(&p, body).unwrap();
        out.push((name, p));
    };

    for loc in ["early", "late"] {
        for task in ["seg", "depth", "normals"] {
            write_tensor(dir, &format!("feat/{loc}/{task}.mtkt"), vec![12, 2, 3], random(&mut rng, 72));
        }
    }
    config(
        "affinity",
        "[affinity]\ntasks = [\"seg\", \"depth\", \"normals\"]\nlocations = [\"early\", \"late\"]\nfeature_pattern = \"feat/{location}/{task}.mtkt\"\nimages = 10\n".into(),
    );

    write_tensor(dir, "branch_affinity.mtkt", vec![2, 3, 3], BRANCH_AFFINITY.to_vec());
    config(
        "branch-search",
        "[branch-search]\naffinity = \"branch_affinity.mtkt\"\ntasks = [\"a\", \"b\", \"c\"]\nshared_costs = [1.0, 1.0]\ndecoder_costs = [0.5, 0.5, 0.5]\nbudget = 5.5\ntop = 0\n".into(),
    );

    let mut trace = String::from("iter,task,loss,grad_norm\n");
    for it in 0..5 {
        for (t, base) in [("seg", 2.0), ("depth", 0.5)] {
            let loss: f64 = base * (1.0 - 0.1 * it as f64) + 0.01 * rng.random::<f64>();
            trace.push_str(&format!("{it},{t},{loss},{}\n", 1.0 + rng.random::<f64>()));
        }
    }
    std::fs::write(dir.join("trace.csv"), trace).unwrap();
    config("balance", "[balance]\nstrategy = \"dwa\"\ntrace = \"trace.csv\"\n".into());

    std::fs::write(dir.join("model.csv"), "task,metric,lower_is_better\nseg,61.5,0\ninst,11.8,1\ndisp,2.66,1\n").unwrap();
    std::fs::write(dir.join("single.csv"), "task,metric,lower_is_better\nseg,65.2,0\ninst,11.7,1\ndisp,2.57,1\n").unwrap();
    config("delta-mtl", "[delta-mtl]\nmodel = \"model.csv\"\nbaseline = \"single.csv\"\n".into());

    let seg: Vec<f64> = (0..64).map(|i| ((i % 8) / 3) as f64).collect();
    let depth: Vec<f64> = (0..64).map(|i| 1.0 + (i / 8) as f64 * 0.3 + 0.01 * (i % 8) as f64).collect();
    write_tensor(dir, "seg.mtkt", vec![8, 8], seg);
    write_tensor(dir, "depth.mtkt", vec![8, 8], depth);
    config(
        "pixel-affinity",
        "[pixel-affinity]\nradius = 1\ndilations = [1, 2, 3]\n[[pixel-affinity.labels]]\nname = \"seg\"\npath = \"seg.mtkt\"\nkind = \"categorical\"\n[[pixel-affinity.labels]]\nname = \"depth\"\npath = \"depth.mtkt\"\nkind = \"continuous\"\nthreshold = 0.1\n".into(),
    );

    config(
        "contrastive-check",
        "[contrastive-check]\ndim = 8\nbackbone_dim = 6\nnegatives = 16\nqueue_size = 32\ninstances = 4\n[contrastive-check.params]\ntemperature = 0.2\nmomentum = 0.999\nneighbors = 5\nnn_weight = 0.4\n".into(),
    );

    config(
        "crop-stats",
        "[crop-stats]\nwidth = 96\nheight = 64\nsamples = 500\nthreshold = 0.5\n".into(),
    );

    let (n, c, h, w) = (2, 2, 3, 3);
    let feats: Vec<String> = (0..n)
        .map(|k| {
            let name = format!("distill/f{k}.mtkt");
            write_tensor(dir, &name, vec![c, h, w], random(&mut rng, c * h * w));
            format!("\"{name}\"")
        })
        .collect();
    write_tensor(dir, "distill/mix_w.mtkt", vec![n * c, n * c], random(&mut rng, n * c * n * c));
    write_tensor(dir, "distill/mix_b.mtkt", vec![n * c], random(&mut rng, n * c));
    write_tensor(dir, "distill/red_w.mtkt", vec![c, n * c], random(&mut rng, c * n * c));
    write_tensor(dir, "distill/red_b.mtkt", vec![c], random(&mut rng, c));
    write_tensor(dir, "distill/sq_w.mtkt", vec![1, c], random(&mut rng, c));
    write_tensor(dir, "distill/sq_b.mtkt", vec![1], random(&mut rng, 1));
    write_tensor(dir, "distill/ex_w.mtkt", vec![c, 1], random(&mut rng, c));
    write_tensor(dir, "distill/ex_b.mtkt", vec![c], random(&mut rng, c));
    let gate = "[[distill-check.gates]]\nsqueeze_weight = \"distill/sq_w.mtkt\"\nsqueeze_bias = \"distill/sq_b.mtkt\"\nexcite_weight = \"distill/ex_w.mtkt\"\nexcite_bias = \"distill/ex_b.mtkt\"\n";
    config(
        "distill-check",
        format!(
            "[distill-check]\nop = \"fpm\"\nfeatures = [{}]\nmix_weight = \"distill/mix_w.mtkt\"\nmix_bias = \"distill/mix_b.mtkt\"\nreduce_weight = \"distill/red_w.mtkt\"\nreduce_bias = \"distill/red_b.mtkt\"\n{gate}{gate}",
            feats.join(", ")
        ),
    );
    out
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mtl-lab")
}

/// Runs the binary and returns (status, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
