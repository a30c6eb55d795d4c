use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_thermosleep");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

const SMALL_SYNTH: &str = r#"
seed = 1
[synth]
n_users = 16
n_admin1 = 4
sites_per_admin1 = 2
stations_per_admin1 = 2
n_days = 40
min_nights = 28
history_start_year = 2008
"#;

const FIT: &str = r#"
[inputs]
epochs = "world/epochs.csv"
stations = "world/stations.csv"
grid = "world/grid.csv"
users = "world/users.csv"
[model]
treatment = "tmin_binned"
"#;

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "s.toml", SMALL_SYNTH);
    assert_eq!(run(d.path(), &["synth", "--config", "s.toml", "--seed", "1", "--out", "a"]), 0);
    assert_eq!(run(d.path(), &["synth", "--config", "s.toml", "--seed", "1", "--out", "b"]), 0);
    assert_eq!(run(d.path(), &["synth", "--config", "s.toml", "--seed", "2", "--out", "c"]), 0);
    let a = snapshot(&d.path().join("a"));
    for f in ["epochs.csv", "stations.csv", "grid.csv", "users.csv", "truth.json", "manifest.json"] {
        assert!(a.contains_key(f), "missing {f}");
    }
    assert_eq!(a, snapshot(&d.path().join("b")));
    assert_ne!(a["epochs.csv"], snapshot(&d.path().join("c"))["epochs.csv"]);
}

#[test]
fn fit_pipeline_is_deterministic_and_rerunnable() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "s.toml", SMALL_SYNTH);
    write(d.path(), "fit.toml", FIT);
    assert_eq!(run(d.path(), &["synth", "--config", "s.toml", "--out", "world"]), 0);
    assert_eq!(run(d.path(), &["fit", "--config", "fit.toml", "--out", "f1"]), 0);
    assert_eq!(run(d.path(), &["fit", "--config", "fit.toml", "--out", "f2"]), 0);
    let f1 = snapshot(&d.path().join("f1"));
    for f in ["fit.json", "curve.csv", "sleep_records.csv", "exposures.csv", "exclusions.json", "manifest.json"] {
        assert!(f1.contains_key(f), "missing {f}");
    }
    assert_eq!(f1, snapshot(&d.path().join("f2")));

    // rerun from the recorded manifest, from another working directory
    let other = tempfile::tempdir().unwrap();
    let manifest = d.path().join("f1/manifest.json");
    let out3 = d.path().join("f3");
    assert_eq!(
        run(other.path(), &["fit", "--config", manifest.to_str().unwrap(), "--out", out3.to_str().unwrap()]),
        0
    );
    assert_eq!(f1, snapshot(&out3));

    // plot the fitted curve twice
    write(d.path(), "plot.toml", "[inputs]\nplot = \"f1/curve.csv\"\n");
    assert_eq!(run(d.path(), &["plot", "--config", "plot.toml", "--out", "p1"]), 0);
    assert_eq!(run(d.path(), &["plot", "--config", "plot.toml", "--out", "p2"]), 0);
    assert_eq!(snapshot(&d.path().join("p1")), snapshot(&d.path().join("p2")));

    // a manifest whose inputs changed is refused
    let users = d.path().join("world/users.csv");
    let mut text = fs::read_to_string(&users).unwrap();
    text.push('\n');
    fs::write(&users, text).unwrap();
    assert_eq!(run(other.path(), &["fit", "--config", manifest.to_str().unwrap(), "--out", "f4"]), 1);
}

#[test]
fn margins_writes_category_slopes() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "s.toml", SMALL_SYNTH);
    let cfg = FIT.replace("treatment = \"tmin_binned\"", "[model.interaction.attribute]\ncolumn = \"group\"");
    write(d.path(), "m.toml", &cfg);
    assert_eq!(run(d.path(), &["synth", "--config", "s.toml", "--out", "world"]), 0);
    assert_eq!(run(d.path(), &["margins", "--config", "m.toml", "--out", "m"]), 0);
    let me: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("m/margins.json")).unwrap()).unwrap();
    let cats: Vec<&str> = me["slopes"].as_array().unwrap().iter().map(|s| s["category"].as_str().unwrap()).collect();
    assert_eq!(cats, ["old", "young"]);
    assert_eq!(me["pairs"].as_array().unwrap().len(), 1);
}

fn scenario_csv(warming: f64) -> String {
    let mut s = String::from("model,year,lat,lon,doy,tmin_c\n");
    for model in ["m1", "m2"] {
        for (year, dt) in [(2010, 0.0), (2050, warming)] {
            for (lat, lon) in [(10.125, 0.125), (10.125, 0.375), (50.125, 20.125)] {
                for doy in 1..=365 {
                    let t = 5.0 + 10.0 * ((doy as f64) / 58.0).sin() + dt;
                    s.push_str(&format!("{model},{year},{lat},{lon},{doy},{t}\n"));
                }
            }
        }
    }
    s
}

#[test]
fn zero_warming_gives_zero_loss() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "scen.csv", &scenario_csv(0.0));
    write(
        d.path(),
        "p.toml",
        "[inputs]\nscenarios = \"scen.csv\"\n[project]\nslopes = [-0.1, -0.05, -0.45]\n",
    );
    assert_eq!(run(d.path(), &["project", "--config", "p.toml", "--out", "o"]), 0);
    let text = fs::read_to_string(d.path().join("o/projection.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let loss = line.rsplit(',').next().unwrap();
        assert!(!loss.starts_with('-') && loss.parse::<f64>().unwrap() == 0.0, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 6);
    assert!(d.path().join("o/projection_ensemble.csv").is_file());
    assert!(d.path().join("o/projection_summary.json").is_file());
}

#[test]
fn uniform_warming_above_knot() {
    let d = tempfile::tempdir().unwrap();
    let mut s = String::from("model,year,lat,lon,doy,tmin_c\n");
    for (year, t) in [(2010, 15), (2050, 16)] {
        for doy in 1..=365 {
            s.push_str(&format!("m,{year},0.125,0.125,{doy},{t}\n"));
        }
    }
    write(d.path(), "scen.csv", &s);
    write(
        d.path(),
        "p.toml",
        "[inputs]\nscenarios = \"scen.csv\"\n[project]\nslopes = [0.0, 0.0, -0.46]\naverage_night_hours = 7.3\n",
    );
    assert_eq!(run(d.path(), &["project", "--config", "p.toml", "--out", "o"]), 0);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("o/projection_summary.json")).unwrap()).unwrap();
    let h = summary["years"][0]["ensemble_loss_hours"].as_f64().unwrap();
    assert!((h - 365.0 * 0.46 / 60.0).abs() < 1e-9, "{h}");
    let n = summary["years"][0]["ensemble_loss_nights"].as_f64().unwrap();
    assert!((n - h / 7.3).abs() < 1e-12);
}

fn golden(produced: &Path, golden: &Path) {
    let got = fs::read(produced).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() || !golden.exists() {
        fs::write(golden, &got).unwrap();
    }
    assert_eq!(got, fs::read(golden).unwrap(), "{} differs from golden", produced.display());
}

#[test]
fn plot_goldens() {
    let d = tempfile::tempdir().unwrap();
    let curve = fixture("fixtures/curve.csv");
    let proj = fixture("fixtures/projection.csv");
    write(d.path(), "c.toml", &format!("[inputs]\nplot = {:?}\n", curve.to_str().unwrap()));
    write(d.path(), "m.toml", &format!("[inputs]\nplot = {:?}\n", proj.to_str().unwrap()));
    assert_eq!(run(d.path(), &["plot", "--config", "c.toml", "--out", "c"]), 0);
    assert_eq!(run(d.path(), &["plot", "--config", "m.toml", "--out", "m"]), 0);
    golden(&d.path().join("c/curve.svg"), &fixture("golden/curve.svg"));
    golden(&d.path().join("m/map_gcm_a_2099.svg"), &fixture("golden/map_gcm_a_2099.svg"));
    // the fixture's extreme bin sits near -7.25 minutes; the axis must reach past it
    let svg = fs::read_to_string(d.path().join("c/curve.svg")).unwrap();
    assert!(svg.contains(">-8<") && svg.contains(">2<"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    // infeasible synth: more required nights than simulated days
    write(d.path(), "bad.toml", "[synth]\nn_days = 20\nmin_nights = 28\n");
    assert_eq!(run(d.path(), &["synth", "--config", "bad.toml", "--out", "o"]), 1);
    // missing input file
    write(d.path(), "missing.toml", "[inputs]\nplot = \"nope.csv\"\n");
    assert_eq!(run(d.path(), &["plot", "--config", "missing.toml", "--out", "o"]), 1);
    // empty curve
    write(d.path(), "empty.csv", "bin_lo,bin_hi,coef,ci_lo,ci_hi,n_obs\n");
    write(d.path(), "empty.toml", "[inputs]\nplot = \"empty.csv\"\n");
    assert_eq!(run(d.path(), &["plot", "--config", "empty.toml", "--out", "o"]), 1);
    // schema violation reports a line number
    write(d.path(), "scen.csv", "lat,lon,doy,tmin_c\n0,0,1,5\n0,0,x,5\n");
    write(d.path(), "p.toml", "[inputs]\nscenarios = \"scen.csv\"\n[project]\nslopes = [0,0,-0.4]\nyear = 2050\nmodel = \"m\"\n");
    let out = Command::new(BIN)
        .args(["project", "--config", "p.toml", "--out", "o"])
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scen.csv:3"));
    // usage errors are validation failures too
    assert_eq!(run(d.path(), &["frobnicate", "--config", "p.toml", "--out", "o"]), 1);

    // a single admin1 region gives one cluster: numerical failure
    write(d.path(), "one.toml", &SMALL_SYNTH.replace("n_admin1 = 4", "n_admin1 = 1"));
    assert_eq!(run(d.path(), &["synth", "--config", "one.toml", "--out", "world"]), 0);
    write(d.path(), "fit.toml", FIT);
    assert_eq!(run(d.path(), &["fit", "--config", "fit.toml", "--out", "f"]), 2);
}
