use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn heatbem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatbem"))
        .args(args)
        .env_remove("HEATBEM_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small, fast solve: 2x2 cube faces, 4 steps, few interior points.
fn solve(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "solve",
        "--subdivisions",
        "2",
        "--timesteps",
        "4",
        "--interior-points",
        "50",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    heatbem(&args)
}

#[test]
fn mesh_gen_writes_a_loadable_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.mesh");
    let o = heatbem(&["mesh-gen", "--subdivisions", "1", "--refine", "1", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("26 vertices, 48 triangles"), "{}", stdout(&o));
    let loaded = heatbem::mesh::load_mesh::<f64>(&path).unwrap();
    assert!(!loaded.non_manifold);
    assert_eq!(loaded.mesh.n_elements(), 48);
}

#[test]
fn solve_writes_all_outputs() {
    for problem in ["dirichlet", "neumann"] {
        let dir = tempfile::tempdir().unwrap();
        let o = solve(dir.path(), &["--problem", problem]);
        assert!(o.status.success(), "{o:?}");
        for f in ["solution.csv", "data.csv", "errors.csv", "interior.csv", "report.txt"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let errors = fs::read_to_string(dir.path().join("errors.csv")).unwrap();
        let row: Vec<&str> = errors.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(&row[..2], &["4", "48"]);
        let computed: f64 = row[2].parse().unwrap();
        assert!(computed > 0.0 && computed < 1.0, "{errors}");
    }
}

#[test]
fn solve_accepts_a_mesh_file() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("cube.mesh");
    assert!(heatbem(&["mesh-gen", "--subdivisions", "2", "--out", mesh.to_str().unwrap()]).status.success());
    let out = dir.path().join("run");
    let o = solve(&out, &["--problem", "dirichlet", "--mesh", mesh.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn far_source_gives_zero_solution() {
    let dir = tempfile::tempdir().unwrap();
    let o = solve(dir.path(), &["--problem", "dirichlet", "--source-point", "0,0,200"]);
    assert!(o.status.success(), "{o:?}");
    let solution = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    for line in solution.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn source_inside_the_cube_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = solve(dir.path(), &["--problem", "dirichlet", "--source-point", "0,0,0.5"]);
    assert!(!o.status.success());
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let read = |workers: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = solve(dir.path(), &["--problem", "neumann", "--workers", workers]);
        assert!(o.status.success(), "{o:?}");
        ["solution.csv", "data.csv", "errors.csv", "interior.csv"]
            .map(|f| fs::read(dir.path().join(f)).unwrap())
    };
    let a = read("1");
    assert_eq!(a, read("1"));
    assert_eq!(a, read("2"));
}

#[test]
fn iteration_cap_gives_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = solve(
        dir.path(),
        &["--problem", "dirichlet", "--preconditioner", "none", "--max-iterations", "2"],
    );
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn convergence_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = heatbem(&[
        "convergence",
        "--problem",
        "both",
        "--levels",
        "2",
        "--subdivisions",
        "1",
        "--timesteps",
        "2",
        "--interior-points",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    for name in ["convergence_dirichlet.csv", "convergence_neumann.csv"] {
        let csv = fs::read_to_string(dir.path().join(name)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Et,Ex,err_computed,eoc_computed,err_projected,eoc_projected,err_repr,eoc_repr");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2,12,"));
        let first: Vec<&str> = lines[1].split(',').collect();
        assert!([3, 5, 7].iter().all(|&i| first[i].is_empty()), "{}", lines[1]);
        assert!(lines[2].starts_with("4,48,"));
    }
}

#[test]
fn convergence_needs_two_levels() {
    let dir = tempfile::tempdir().unwrap();
    let o = heatbem(&["convergence", "--levels", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn verify_kernels_passes_and_detects_perturbations() {
    let o = heatbem(&["verify-kernels", "--pairs", "8"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all checks passed"));

    let o = heatbem(&["verify-kernels", "--pairs", "8", "--perturb", "1e-6"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("verification FAILED"));

    let o = heatbem(&["verify-kernels", "--empty-grid"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("warning:"));
}
