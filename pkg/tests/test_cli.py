import json
from pathlib import Path

import pytest

from attrmogen.cli import COMMANDS, main
from attrmogen.config import (
    RESOLVED_CONFIG,
    RunConfig,
    apply_overrides,
    config_from_dict,
    load_config,
    output_dir,
)
from attrmogen.errors import ConfigError
from attrmogen.nets import param_checksum
from attrmogen.vqvae import DecoupVqvaeConfig, build_models, load_vqvae

TINY_YAML = """\
config_version: 1
seed: 0
data: {n_per_cell: 4}
vqvae: {iterations: 3, n_codes: 32, code_dim: 8, width: 16, batch_size: 16, attr_dim: 4, classifier_width: 8}
transformer: {steps: 3, width: 32, text_dim: 16, layers: 1, heads: 2, decode_iters: 3, batch_size: 16}
eval: {steps: 3, repetitions: 2, mm_reps: 2, mm_texts: 2, classifier_iterations: 3, feat_dim: 8, width: 16, text_dim: 8, diversity_pairs: 10}
"""

PIPELINE = [
    ["synth-data"],
    ["preprocess"],
    ["train-vqvae"],
    ["train-transformer"],
    ["train-eval-encoder"],
    ["train-attr-classifier"],
    ["evaluate"],
    ["attr-protocol"],
    ["generate", "--text", "a person walks forward", "--age", "1", "--gender", "0"],
    ["export-features"],
    ["verify-bounds", "--trials", "40"],
]


def run_all(root: Path, cfg: Path):
    for argv in PIPELINE:
        assert main([*argv, "--config", str(cfg), "--out", str(root)]) == 0, argv


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    run_all(base / "a", cfg)
    run_all(base / "b", cfg)
    return base, cfg


def test_every_subcommand_is_byte_deterministic(two_runs):
    base, _ = two_runs
    a, b = tree(base / "a"), tree(base / "b")
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k] != b[k]]
    assert diff == []
    covered = {"corpus", "preprocessed", "vqvae", "transformer", "eval_encoder", "attr_classifier", "reports",
               "generated", "features"}
    assert covered <= {k.split("/")[0] for k in a}
    assert len(PIPELINE) == len(COMMANDS)


def test_outputs_hold_resolved_config_and_no_absolute_paths(two_runs):
    base, cfg = two_runs
    expected = load_config(cfg)
    for sub in ("corpus", "vqvae", "transformer", "reports", "generated", "features"):
        resolved = json.loads((base / "a" / sub / RESOLVED_CONFIG).read_text())
        assert resolved["config_hash"] == expected.hash()
        assert resolved["config"] == expected.to_dict()
    for name, blob in tree(base / "a").items():
        if name.endswith((".json", ".csv")):
            assert str(base).encode() not in blob, name


def test_generate_writes_csv(two_runs):
    base, _ = two_runs
    lines = (base / "a" / "generated" / "motions.csv").read_text().splitlines()
    assert lines[0].startswith("id,frame,c0")
    assert len(lines) == 1 + 64


def test_verify_bounds_report(two_runs, capsys):
    base, cfg = two_runs
    assert main(["verify-bounds", "--trials", "1000", "--seed", "0", "--out", str(base / "vb")]) == 0
    out = capsys.readouterr().out
    assert "entropy_bound" in out and "FAIL" not in out
    report = json.loads((base / "vb" / "reports" / "bounds.json").read_text())
    assert report["entropy_bound"]["violations"] == 0 and report["entropy_bound"]["trials"] == 1000


def test_zero_iteration_vqvae_equals_initialization(two_runs):
    base, cfg = two_runs
    root = base / "zero"
    for argv in (["synth-data"], ["preprocess"], ["train-vqvae", "--iterations", "0"]):
        assert main([*argv, "--config", str(cfg), "--out", str(root)]) == 0
    run, meta = load_vqvae(root / "vqvae")
    init, _ = build_models(DecoupVqvaeConfig(**meta["config"]), meta["channels"])
    assert meta["config"]["iterations"] == 0
    assert param_checksum(run.model) == param_checksum(init)


def test_evaluate_refuses_schema_mismatch(two_runs, capsys):
    base, cfg = two_runs
    root = base / "a"
    meta_path = root / "vqvae" / "metadata.json"
    original = meta_path.read_text()
    try:
        meta = json.loads(original)
        meta["schema_hash"] = "0" * 16
        meta_path.write_text(json.dumps(meta))
        assert main(["evaluate", "--config", str(cfg), "--out", str(root)]) != 0
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("SchemaError:")
    finally:
        meta_path.write_text(original)


def test_corrupted_corpus_is_single_line_error(tmp_path, capsys, two_runs):
    base, cfg = two_runs
    root = tmp_path / "r"
    assert main(["synth-data", "--config", str(cfg), "--out", str(root)]) == 0
    data = root / "corpus" / "data.bin"
    data.write_bytes(data.read_bytes()[:100])
    assert main(["preprocess", "--config", str(cfg), "--out", str(root)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("CorpusTruncatedError:")


def test_missing_config_and_unknown_subcommand(tmp_path, capsys):
    assert main(["synth-data", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) != 0
    assert capsys.readouterr().err.startswith("ConfigError:")
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


# -- config -----------------------------------------------------------------


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"vqvae": {"alpah": 0.1}})
    with pytest.raises(ConfigError):
        config_from_dict({"extra": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"synth": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"config_version": 2})


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\nvqvae: {alpha: 0.02, iterations: 10}\n")
    cfg = load_config(p)
    assert cfg.vqvae.alpha == 0.02 and cfg.seed == 3
    cfg = apply_overrides(cfg, seed=5, alpha=0.005, lam=1.0, iterations=7, attr_in_text="both")
    assert (cfg.seed, cfg.vqvae.seed, cfg.synth.seed, cfg.transformer.seed) == (5, 5, 5, 5)
    assert (cfg.vqvae.alpha, cfg.vqvae.lam, cfg.vqvae.iterations) == (0.005, 1.0, 7)
    assert cfg.transformer.attr_in_text == "both"


def test_json_config_and_hash_stability(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"config_version": 1, "eval": {"repetitions": 5}}))
    a = load_config(p)
    assert a.eval.repetitions == 5
    assert a.hash() == load_config(p).hash() != RunConfig().hash()
    b = apply_overrides(load_config(p), out=str(tmp_path / "elsewhere"))
    assert b.hash() == a.hash()


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("ATTRMOGEN_OUT", str(tmp_path / "env"))
    assert output_dir(RunConfig()) == tmp_path / "env"
    assert output_dir(RunConfig(out="x")) == Path("x")
