use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const COARSE: [&str; 6] = ["--nx", "181", "--nt", "41", "--ns", "41"];
const CSVS: [&str; 6] = ["v.csv", "V.csv", "gamma.csv", "d.csv", "d_x.csv", "f_family.csv"];

fn instance() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../instances/remark52.cfg")
}

fn sceq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceq"))
        .args(args)
        .env("SCEQ_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn solve_coarse(out: &Path, extra: &[&str]) -> Output {
    let inst = instance();
    let mut args = vec!["solve", inst.to_str().unwrap()];
    args.extend(COARSE);
    args.extend(extra);
    sceq(out, &args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Validates the subset of JSON Schema used by docs/report.schema.json:
/// type, required, properties, items, enum and local $ref.
fn validate(schema: &Value, root: &Value, value: &Value, at: &str) -> Vec<String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let target = r.trim_start_matches("#/").split('/').fold(root, |s, k| &s[k]);
        return validate(target, root, value, at);
    }
    let mut errs = Vec::new();
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|&t| match t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => false,
        });
        if !ok {
            errs.push(format!("{at}: expected {types:?}, got {value}"));
            return errs;
        }
    }
    if let Some(Value::Array(allowed)) = schema.get("enum") {
        if !allowed.contains(value) {
            errs.push(format!("{at}: {value} not in {allowed:?}"));
        }
    }
    if let Value::Object(map) = value {
        if let Some(Value::Array(req)) = schema.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !map.contains_key(k) {
                    errs.push(format!("{at}: missing `{k}`"));
                }
            }
        }
        if let Some(Value::Object(props)) = schema.get("properties") {
            for (k, s) in props {
                if let Some(v) = map.get(k) {
                    errs.extend(validate(s, root, v, &format!("{at}.{k}")));
                }
            }
        }
    }
    if let (Value::Array(items), Some(s)) = (value, schema.get("items")) {
        for (i, v) in items.iter().enumerate() {
            errs.extend(validate(s, root, v, &format!("{at}[{i}]")));
        }
    }
    errs
}

fn schema() -> Value {
    json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json"))
}

#[test]
fn solve_writes_every_artifact_and_a_valid_report() {
    let dir = TempDir::new().unwrap();
    let o = solve_coarse(dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in CSVS.iter().chain(&["report.json"]) {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let head = fs::read_to_string(dir.path().join("V.csv")).unwrap();
    assert!(head.starts_with("x,t,value\n"));
    let fam = fs::read_to_string(dir.path().join("f_family.csv")).unwrap();
    assert!(fam.starts_with("x,t,s,value\n"));
    let report = json(&dir.path().join("report.json"));
    let s = schema();
    let errs = validate(&s, &s, &report, "report");
    assert!(errs.is_empty(), "{errs:#?}");
    assert_eq!(report["status"], "converged");
    assert_eq!(report["manifest"]["instance"]["grid"]["nx"], 181);
    let sha = report["manifest"]["input_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(code(&solve_coarse(a.path(), &[])), 0);
    assert_eq!(code(&solve_coarse(b.path(), &["--threads", "1"])), 0);
    for f in CSVS {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn missing_config_key_names_the_key() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(instance()).unwrap().replace("sigma = 0.35\n", "");
    let cfg = dir.path().join("broken.cfg");
    fs::write(&cfg, text).unwrap();
    let o = sceq(dir.path(), &["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
}

#[test]
fn bad_overrides_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let inst = instance();
    let o = sceq(dir.path(), &["solve", inst.to_str().unwrap(), "--discount", "harmonic:q=2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = sceq(dir.path(), &["solve", inst.to_str().unwrap(), "--nx", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = sceq(dir.path(), &["solve", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn steep_discount_fails_numerically_and_still_reports() {
    // k = 1 breaks the discount conditions, so the coupling gradient leaves
    // its admissible band and the obstacle solve refuses it
    let dir = TempDir::new().unwrap();
    let o = solve_coarse(dir.path(), &["--discount", "hyperbolic:k=1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["status"], "error");
    assert!(report["error"].as_str().unwrap().contains("coupling gradient"));
    let s = schema();
    assert!(validate(&s, &s, &report, "report").is_empty());
}

#[test]
fn iteration_cap_exits_nonzero_with_the_trace_written() {
    let dir = TempDir::new().unwrap();
    let o = solve_coarse(dir.path(), &["--max-iter", "1"]);
    assert_eq!(code(&o), 1);
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["converged"], false);
    assert!(!report["trace"].as_array().unwrap().is_empty());
    assert!(dir.path().join("trace.csv").is_file());
}

#[test]
fn verify_passes_clean_artifacts_and_flags_a_bumped_node() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&solve_coarse(dir.path(), &[])), 0);
    let o = sceq(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));
    assert!(dir.path().join("verify.json").is_file());

    let path = dir.path().join("V.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines.len() / 2;
    let (head, last) = lines[row].rsplit_once(',').unwrap();
    let bumped: f64 = last.parse::<f64>().unwrap() + 1.0;
    lines[row] = format!("{head},{bumped}");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let o = sceq(dir.path(), &["verify"]);
    assert_eq!(code(&o), 1);
    let rep = json(&dir.path().join("verify.json"));
    let failed: Vec<&str> = rep["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["hard"] == true && c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"residual complementarity"), "{failed:?}");
}

#[test]
fn verify_without_artifacts_exits_three() {
    let dir = TempDir::new().unwrap();
    let o = sceq(dir.path(), &["verify", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn verify_emits_a_refinement_table_for_a_pair() {
    let root = TempDir::new().unwrap();
    let (a, b) = (root.path().join("coarse"), root.path().join("fine"));
    let inst = instance();
    let i = inst.to_str().unwrap();
    assert_eq!(code(&sceq(&a, &["solve", i, "--nx", "91", "--nt", "21", "--ns", "21"])), 0);
    assert_eq!(code(&sceq(&b, &["solve", i, "--nx", "181", "--nt", "41", "--ns", "41"])), 0);
    let o = sceq(root.path(), &["verify", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("refinement table"));
    let table = fs::read_to_string(root.path().join("refinement.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "nx,nt,complementarity,hjb_tolerance,ratio");
    let ratio: f64 = rows[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio < 1.0, "residual did not shrink: {ratio}");
}

#[test]
fn oracle_reports_both_gaps() {
    let dir = TempDir::new().unwrap();
    let inst = instance();
    let mut args = vec!["oracle", inst.to_str().unwrap(), "--gamma", "0.3"];
    args.extend(COARSE);
    let o = sceq(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("E1 =") && out.contains("E2 ="), "{out}");
    let rep = json(&dir.path().join("oracle.json"));
    assert!(rep["base"]["e1"].as_f64().unwrap() < 1e-2);
    assert!(rep["base"]["e2"].as_f64().unwrap() < 1e-2);
}

#[test]
fn monte_carlo_is_reproducible_for_a_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let inst = instance();
    let mut args = vec!["mc", inst.to_str().unwrap(), "--x0", "-0.5", "--n", "4000", "--seed", "7", "--steps", "200"];
    args.extend(COARSE);
    let run = |dir: &Path, extra: &[&str]| {
        let mut all = args.clone();
        all.extend(extra);
        let o = sceq(dir, &all);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(dir.join("mc.json")).unwrap()
    };
    let first = run(a.path(), &[]);
    let again = run(b.path(), &["--threads", "1"]);
    let strip = |bytes: &[u8]| {
        let mut v: Value = serde_json::from_slice(bytes).unwrap();
        v["manifest"]["out_dir"] = Value::Null;
        v
    };
    assert_eq!(strip(&first), strip(&again));
    let rep: Value = serde_json::from_slice(&first).unwrap();
    assert!(rep["report"]["std_error"].as_f64().unwrap() > 0.0);
    assert_eq!(rep["manifest"]["seed"], 7);
}

#[test]
fn family_point_needs_an_s_node() {
    let dir = TempDir::new().unwrap();
    let inst = instance();
    let mut args = vec!["mc", inst.to_str().unwrap(), "--x0", "0.0", "--t0", "0.05", "--n", "200", "--steps", "100"];
    args.extend(COARSE);
    let mut on = args.clone();
    on.extend(["--s", "0.025"]);
    let o = sceq(dir.path(), &on);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("mc.json"))["target"], "family");
    let mut off = args.clone();
    off.extend(["--s", "0.0251"]);
    assert_eq!(code(&sceq(dir.path(), &off)), 2);
}

#[test]
fn perturbation_table_is_written() {
    let dir = TempDir::new().unwrap();
    let inst = instance();
    let mut args = vec!["perturb", inst.to_str().unwrap(), "--x0", "0.9", "--n", "1000", "--seed", "3", "--steps", "400", "--h", "0.01"];
    args.extend(COARSE);
    let o = sceq(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = json(&dir.path().join("perturb.json"));
    assert_eq!(rep["rows"].as_array().unwrap().len(), 2);
    assert_eq!(rep["pass"], true);
}

#[test]
fn check_lists_the_example_table_and_mutations() {
    let dir = TempDir::new().unwrap();
    let inst = instance();
    let o = sceq(dir.path(), &["check", inst.to_str().unwrap(), "--mutations"]);
    let rep = json(&dir.path().join("check.json"));
    let example = rep["example"]["items"].as_array().unwrap();
    assert!(example.iter().all(|i| i["pass"] == true));
    assert!(rep["mutations"].as_array().unwrap().iter().all(|m| m["named"] == true));
    // the nodewise probe reports L F̃′ < 0 near the running-loss switch, so
    // the overall verdict is a failure
    let grid_failures: Vec<&str> = rep["grid"]["items"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|i| i["pass"] == false)
        .map(|i| i["name"].as_str().unwrap())
        .collect();
    assert_eq!(grid_failures, ["L F̃′ ≥ 0"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("closed-form example inequalities (23 of 23 pass)"));
}
