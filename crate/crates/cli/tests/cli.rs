use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use render_pretrain::image::read_pfm;
use render_pretrain::training::Checkpoint;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_render-pretrain"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// `pretrain` with small desk settings.
fn train(data: &Path, out: &Path, iters: &str) -> Output {
    run(&[
        "pretrain",
        "--data",
        s(data),
        "--out",
        s(out),
        "--iters",
        iters,
        "--preset",
        "desk",
        "--set",
        "volume_res=6",
        "--set",
        "rays_per_image=8",
    ])
}

/// A small dataset and a two-step checkpoint shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn ckpt(&self) -> PathBuf {
        self.dir.path().join("run.ckpt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let out = run(&[
            "synth",
            "--out",
            s(&f.data()),
            "--views",
            "5",
            "--resolution",
            "20",
            "--fused",
            "3",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = train(&f.data(), &f.ckpt(), "2");
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    })
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn version_reports_the_schema_hash() {
    let out = run(&["--version"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains(env!("CARGO_PKG_VERSION")));
    assert!(
        text.contains(&render_pretrain::config::RunConfig::schema_hash()),
        "{text}"
    );
}

#[test]
fn synth_writes_every_file_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene.json");
    fs::write(
        &scene,
        r#"[{"type": "sphere", "center": [0, 0, 0], "radius": 0.5, "albedo": [0.8, 0.3, 0.2], "class": 1}]"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = run(&[
            "synth",
            "--scene",
            s(&scene),
            "--out",
            s(d),
            "--views",
            "5",
            "--resolution",
            "16",
            "--seed",
            "3",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let names: Vec<String> = files(&a).into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"cloud.ply".to_string()));
    for i in 0..5 {
        for stem in ["cam", "rgb", "depth", "sem"] {
            assert!(
                names
                    .iter()
                    .any(|n| n.starts_with(&format!("{stem}_{i:03}."))),
                "{stem} {i}"
            );
        }
    }
    assert_eq!(names.len(), 21);
    assert_eq!(files(&a), files(&b));
}

#[test]
fn synth_rejects_bad_input_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", s(&tmp.path().join("x")), "--views", "1"]);
    assert_eq!(code(&out), 2);
    let scene = tmp.path().join("bad.json");
    fs::write(&scene, "[{\"type\": \"sphere\",\n  \"radius\": }]").unwrap();
    let out = run(&[
        "synth",
        "--scene",
        s(&scene),
        "--out",
        s(&tmp.path().join("y")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2 column"), "{}", stderr(&out));
}

#[test]
fn pretrain_writes_a_loadable_checkpoint_and_log() {
    let f = fixture();
    let ckpt = Checkpoint::load(&f.ckpt()).unwrap();
    assert_eq!(ckpt.step, 2);
    let csv = fs::read_to_string(f.ckpt().with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,loss,loss_c,loss_d,loss_sem,lr\n"));
}

#[test]
fn pretrain_prints_the_final_line() {
    let f = fixture();
    let out_path = f.dir.path().join("one.ckpt");
    let out = train(&f.data(), &out_path, "1");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let last = stdout(&out).lines().last().unwrap_or_default().to_string();
    let keys: Vec<&str> = last
        .split_whitespace()
        .map(|kv| kv.split('=').next().unwrap())
        .collect();
    assert_eq!(keys, ["final", "loss", "psnr", "depth_mae"], "{last}");
    for kv in last.split_whitespace().skip(1) {
        let v: f64 = kv.split_once('=').unwrap().1.parse().unwrap();
        assert!(v.is_finite(), "{last}");
    }
}

#[test]
fn unknown_config_key_is_named() {
    let f = fixture();
    let cfg = f.dir.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nlr = 0.001\nlearning_rate = 0.1\n").unwrap();
    let out = run(&[
        "pretrain",
        "--data",
        s(&f.data()),
        "--out",
        s(&f.dir.path().join("x.ckpt")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    let out = run(&[
        "pretrain",
        "--data",
        s(&f.data()),
        "--out",
        s(&f.dir.path().join("x.ckpt")),
        "--set",
        "bogus=1",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn presets_reach_the_checkpoint() {
    let f = fixture();
    for (preset, rays, samples, lambda_d) in [("indoor", 128, 128, 0.1), ("outdoor", 512, 96, 0.1)]
    {
        let path = f.dir.path().join(format!("{preset}.ckpt"));
        let out = run(&[
            "pretrain",
            "--data",
            s(&f.data()),
            "--out",
            s(&path),
            "--iters",
            "0",
            "--preset",
            preset,
            "--set",
            "volume_res=4",
            "--set",
            "hidden=8",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let c = Checkpoint::load(&path).unwrap().config;
        assert_eq!(
            (c.rays_per_image, c.samples_per_ray, c.lambda_d),
            (rays, samples, lambda_d)
        );
    }
}

#[test]
fn resumed_run_matches_a_straight_run() {
    let f = fixture();
    let straight = f.dir.path().join("straight.ckpt");
    assert_eq!(code(&train(&f.data(), &straight, "4")), 0);
    let (data, halfway) = (f.data(), f.dir.path().join("halfway.ckpt"));
    let out = run(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&halfway),
        "--iters",
        "4",
        "--stop-after",
        "2",
        "--preset",
        "desk",
        "--set",
        "volume_res=6",
        "--set",
        "rays_per_image=8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(Checkpoint::load(&halfway).unwrap().step, 2);
    let resumed = f.dir.path().join("resumed.ckpt");
    let out = run(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&halfway),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
    // The resumed log holds only the steps it ran.
    let straight_log = fs::read_to_string(straight.with_extension("csv")).unwrap();
    let resumed_log = fs::read_to_string(resumed.with_extension("csv")).unwrap();
    let tail: Vec<&str> = straight_log.lines().skip(3).collect();
    assert_eq!(resumed_log.lines().skip(1).collect::<Vec<_>>(), tail);
    let out = run(&[
        "pretrain",
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&halfway),
        "--seed",
        "2",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn render_is_deterministic_across_thread_counts() {
    let f = fixture();
    let cam = f.data().join("cam_004.json");
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let prefix = f.dir.path().join(format!("view{i}"));
        let out = run(&[
            "--threads",
            threads,
            "render",
            "--checkpoint",
            s(&f.ckpt()),
            "--camera",
            s(&cam),
            "--out",
            s(&prefix),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let read = |suffix: &str| fs::read(format!("{}_{suffix}", prefix.display())).unwrap();
        outputs.push((read("rgb.ppm"), read("depth.pfm"), read("acc.pfm")));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let acc = read_pfm(&mut BufReader::new(outputs[0].2.as_slice())).unwrap();
    assert_eq!((acc.width, acc.height), (20, 20));
    assert!(acc.data.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn render_rejects_a_resolution_mismatch() {
    let f = fixture();
    let cam = f.data().join("cam_000.json");
    let prefix = f.dir.path().join("bad");
    let out = run(&[
        "render",
        "--checkpoint",
        s(&f.ckpt()),
        "--camera",
        s(&cam),
        "--out",
        s(&prefix),
        "--width",
        "32",
    ]);
    assert_eq!(code(&out), 2);
    assert!(!Path::new(&format!("{}_rgb.ppm", prefix.display())).exists());
}

#[test]
fn untrained_checkpoint_gives_an_empty_mesh() {
    let f = fixture();
    let path = f.dir.path().join("untrained.ckpt");
    assert_eq!(code(&train(&f.data(), &path, "0")), 0);
    let obj = f.dir.path().join("untrained.obj");
    let out = run(&[
        "mesh",
        "--checkpoint",
        s(&path),
        "--resolution",
        "16",
        "--out",
        s(&obj),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "vertices=0 triangles=0");
    assert!(stderr(&out).contains("empty mesh"), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&obj).unwrap(), "");
    let out = run(&[
        "mesh",
        "--checkpoint",
        s(&path),
        "--resolution",
        "1",
        "--out",
        s(&obj),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupt_adjoint() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for g in ["encoder", "conv", "sdf", "rgb", "semantic", "log_s"] {
        assert_eq!(
            text.lines()
                .filter(|l| l.split_whitespace().next() == Some(g))
                .count(),
            1,
            "{g}"
        );
    }
    for line in text.lines().filter(|l| l.contains("worst_rel")) {
        let rel: f64 = line.split_whitespace().nth(4).unwrap().parse().unwrap();
        assert!(rel < 1e-4, "{line}");
    }
    let out = run(&["gradcheck", "--corrupt-adjoint"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_matches_the_pretrain_report() {
    let f = fixture();
    let path = f.dir.path().join("eval.ckpt");
    let trained = stdout(&train(&f.data(), &path, "1"));
    let out = run(&["eval", "--checkpoint", s(&path), "--data", s(&f.data())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let field = |t: &str, k: &str| {
        t.split_whitespace()
            .find_map(|kv| kv.strip_prefix(k).map(str::to_string))
    };
    assert_eq!(field(&trained, "psnr="), field(&text, "psnr="));
    assert_eq!(field(&trained, "depth_mae="), field(&text, "depth_mae="));
}
