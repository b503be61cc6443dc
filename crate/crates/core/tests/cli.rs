use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;

use seistomo_core::cli::RunConfig;
use seistomo_core::formats::{decode_data, decode_pgm, read_model, write_model};
use seistomo_core::inversion::schedule::scheduled_iterations;
use seistomo_core::inversion::{ContinuationSchedule, InversionMode};
use seistomo_core::mesh::RegularGrid;

fn small_config() -> Value {
    json!({
        "name": "small",
        "grid": { "n": [24, 16], "h": [0.05, 0.05] },
        "truth": { "kind": "lens", "background": 2.0, "lens_contrast": 0.5, "sub_lens_contrast": -0.1 },
        "start": { "kind": "linear_gradient", "top": 2.0, "bottom": 2.3 },
        "acquisition": { "num_sources": 4, "receiver_stride": 1, "depth_nodes": 1, "offset_min": 0.0, "offset_max": 10.0 },
        "frequencies": [2.0, 3.0],
        "peak_frequency": 2.5,
        "attenuation": 0.12566370614359174,
        "layer_width": 6,
        "noise": 0.0,
        "schedule": { "batch_size": 1, "sweeps": 1, "gn_stage1": 2, "gn_per_batch": 2, "alpha0": 100.0 },
        "solver": { "method": "dense_lu_small" },
        "snapshots": false,
        "seed": 7
    })
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(cfg: &Value) -> Run {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("config.json"), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        Run { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn seistomo(&self, args: &[&str], out: &str) -> std::process::Output {
        Command::new(env!("CARGO_BIN_EXE_seistomo"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out(out))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str], out: &str) {
        let o = self.seistomo(args, out);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn data(dir: &Path) -> seistomo_core::formats::DataFile {
    decode_data(&fs::read(dir.join("data.jsdt")).unwrap()).unwrap()
}

#[test]
fn noiseless_simulation_is_deterministic() {
    let run = Run::new(&small_config());
    run.ok(&["simulate"], "a");
    run.ok(&["simulate", "--threads", "1"], "b");
    let a = fs::read(run.out("a").join("data.jsdt")).unwrap();
    let b = fs::read(run.out("b").join("data.jsdt")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with(b"JSDT1 4 2 24\n"));
}

#[test]
fn noise_level_matches_the_configured_fraction() {
    let mut cfg = small_config();
    let clean_run = Run::new(&cfg);
    clean_run.ok(&["simulate"], "clean");
    cfg["noise"] = json!(0.01);
    let noisy_run = Run::new(&cfg);
    noisy_run.ok(&["simulate"], "noisy");
    let clean = data(&clean_run.out("clean"));
    let noisy = data(&noisy_run.out("noisy"));
    let (mut sum, mut count) = (0.0, 0usize);
    for (ct, nt) in clean.fwi.iter().flatten().zip(noisy.fwi.iter().flatten()) {
        let max = ct.iter().filter(|v| !v.re.is_nan()).map(|v| v.norm()).fold(0.0, f64::max);
        for (c, n) in ct.iter().zip(nt).filter(|(c, _)| !c.re.is_nan()) {
            sum += ((n - c).norm() / max).powi(2);
            count += 1;
        }
    }
    assert!(count >= 100);
    let rms = (sum / count as f64).sqrt();
    assert!((0.008..=0.012).contains(&rms), "{rms} over {count} samples");

    let (mut sum, mut count) = (0.0, 0usize);
    for (ct, nt) in clean.travel_times.unwrap().iter().zip(noisy.travel_times.as_ref().unwrap()) {
        let max = ct.iter().filter(|v| !v.is_nan()).fold(0.0f64, |a, v| a.max(v.abs()));
        for (c, n) in ct.iter().zip(nt).filter(|(c, _)| !c.is_nan()) {
            sum += ((n - c) / max).powi(2);
            count += 1;
        }
    }
    let rms = (sum / count as f64).sqrt();
    assert!((0.008..=0.012).contains(&rms), "travel times {rms} over {count} samples");
}

#[test]
fn constant_truth_gives_straight_ray_travel_times() {
    let mut cfg = small_config();
    cfg["truth"] = json!({ "kind": "constant", "velocity": 2.5 });
    let run = Run::new(&cfg);
    run.ok(&["simulate"], "sim");
    let tt = data(&run.out("sim")).travel_times.unwrap();
    let geo = RunConfig::load(&run.config()).unwrap().survey().unwrap().geometry().clone();
    for (s, row) in geo.sources().iter().zip(&tt) {
        for (r, t) in geo.receivers().iter().zip(row) {
            let d = ((s[0] - r[0]).powi(2) + (s[1] - r[1]).powi(2)).sqrt();
            assert!((t - d / 2.5).abs() < 1e-6, "{t} vs {}", d / 2.5);
        }
    }
}

#[test]
fn fwi_without_iterations_returns_the_start_model() {
    let mut cfg = small_config();
    cfg["schedule"]["gn_per_batch"] = json!(0);
    let run = Run::new(&cfg);
    run.ok(&["simulate"], "out");
    run.ok(&["invert", "--mode", "fwi_only"], "out");
    let (_, start) = read_model(&run.out("out").join("model_start.jssm")).unwrap();
    let (_, fin) = read_model(&run.out("out").join("model_final.jssm")).unwrap();
    assert_eq!(start, fin);
    let history = fs::read_to_string(run.out("out").join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn history_has_one_row_per_scheduled_iteration() {
    let cfg = small_config();
    let run = Run::new(&cfg);
    run.ok(&["simulate"], "out");
    let schedule: ContinuationSchedule = serde_json::from_value(cfg["schedule"].clone()).unwrap();
    for mode in [InversionMode::FwiOnly, InversionMode::TomoThenFwi, InversionMode::JointTwoStage] {
        let out = format!("out_{}", mode.name());
        fs::create_dir_all(run.out(&out)).unwrap();
        fs::copy(run.out("out").join("data.jsdt"), run.out(&out).join("data.jsdt")).unwrap();
        run.ok(&["invert", "--mode", mode.name()], &out);
        let history = fs::read_to_string(run.out(&out).join("history.csv")).unwrap();
        let rows: Vec<Vec<&str>> = history.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), scheduled_iterations(mode, &schedule, 2), "{}", mode.name());
        for w in rows.windows(2) {
            if w[0][1..4] == w[1][1..4] {
                let (a, b): (f64, f64) = (w[0][7].parse().unwrap(), w[1][7].parse().unwrap());
                assert!(b <= a, "{}: {a} then {b}", mode.name());
            }
        }
        assert!(run.out(&out).join("checkpoints").join("iter_0001.jssm").exists());
    }
}

#[test]
fn render_maps_the_value_range_to_gray_levels() {
    let dir = TempDir::new().unwrap();
    let g = RegularGrid::with_spacing(&[6, 4], &[0.1, 0.1]).unwrap();
    let cases: [(Vec<f64>, Vec<u8>); 2] =
        [(vec![2.0; 24], vec![128]), ((0..24).map(|i| if i % 3 == 0 { 1.5 } else { 3.0 }).collect(), vec![0, 255])];
    for (k, (v, want)) in cases.into_iter().enumerate() {
        let model = dir.path().join(format!("m{k}.jssm"));
        write_model(&model, &g, &v).unwrap();
        let pgm = dir.path().join(format!("m{k}.pgm"));
        let o = Command::new(env!("CARGO_BIN_EXE_seistomo")).arg("render").arg(&model).arg("--out").arg(&pgm).output().unwrap();
        assert!(o.status.success());
        let (w, h, px) = decode_pgm(&fs::read(&pgm).unwrap()).unwrap();
        assert_eq!((w, h), (6, 4));
        let mut levels = px.clone();
        levels.sort();
        levels.dedup();
        assert_eq!(levels, want);
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let mut cfg = small_config();
    cfg["colour"] = json!("blue");
    let run = Run::new(&cfg);
    let o = run.seistomo(&["simulate"], "out");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let mut cfg = small_config();
    cfg["grid"]["h"] = json!([0.05]);
    let o = Run::new(&cfg).seistomo(&["simulate"], "out");
    assert_eq!(o.status.code(), Some(2));

    let run = Run::new(&small_config());
    let o = run.seistomo(&["invert"], "missing");
    assert_eq!(o.status.code(), Some(4));

    let o = Command::new(env!("CARGO_BIN_EXE_seistomo")).args(["render", "/nonexistent/model.jssm"]).output().unwrap();
    assert_eq!(o.status.code(), Some(4));

    let o = Command::new(env!("CARGO_BIN_EXE_seistomo")).args(["simulate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
