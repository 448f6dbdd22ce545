import csv
import json

import numpy as np
import pytest

from jointebm import cli
from jointebm.data import load_dataset
from jointebm.model import LatentEbm
from jointebm.rng import stream

CONFIG = """
schema_version = 1

[model]
latent_dims = [2, 2]
energy_hidden = [8]
cond_hidden = [8]
dec_hidden = [8]
enc_hidden = [8]
dtype = "float64"

[prior_sampler]
steps = 5
space = "epsilon"

[trainer]
iterations = {iterations}
batch_size = 32
lr_alpha = 1e-3
lr_beta = 1e-3
lr_omega = 1e-3
log_every = 1
checkpoint_every = 2

[data]
generator = "mixture"
n = 200
centers = [[-2.0, 0.0], [2.0, 0.0]]
std = 0.3
"""


def write_config(tmp_path, iterations=4, text=None):
    p = tmp_path / "run.toml"
    p.write_text(text if text is not None else CONFIG.format(iterations=iterations))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--config", str(write_config(d)), "--out", str(d / "run")]) == 0
    return d / "run" / "checkpoints" / "final"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_outputs(tmp_path):
    assert run("train", "--config", write_config(tmp_path), "--out", tmp_path / "out") == 0
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
    lines = (tmp_path / "out" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln)["iter"] for ln in lines] == [1, 2, 3, 4]
    assert (tmp_path / "out" / "checkpoints" / "iter_000002" / "weights.bin").exists()


def test_zero_iterations_emits_initial_checkpoint(tmp_path):
    assert run("train", "--config", write_config(tmp_path, iterations=0), "--out", tmp_path / "out") == 0
    assert sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir()) == ["final"]


def test_resume_continues_run_exactly(tmp_path):
    cfg = write_config(tmp_path)
    run("train", "--config", cfg, "--out", tmp_path / "a")
    run("train", "--config", cfg, "--out", tmp_path / "b")
    assert run("train", "--config", cfg, "--out", tmp_path / "b", "--resume",
               tmp_path / "b" / "checkpoints" / "iter_000002") == 0
    wa = (tmp_path / "a" / "checkpoints" / "final" / "weights.bin").read_bytes()
    wb = (tmp_path / "b" / "checkpoints" / "final" / "weights.bin").read_bytes()
    assert wa == wb
    rows = [json.loads(ln) for ln in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == [1, 2, 3, 4]


def test_malformed_toml_reports_location(tmp_path, capsys):
    cfg = write_config(tmp_path, text="schema_version = 1\n[model\nlatent_dims = [2]\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "line 2" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    CONFIG.format(iterations=1).replace("schema_version = 1", "schema_version = 2"),
    CONFIG.format(iterations=1).replace("batch_size = 32", "batch_size = 32\nbatchsize = 3"),
    CONFIG.format(iterations=1) + "\n[extra]\nx = 1\n",
    CONFIG.format(iterations=1).replace('generator = "mixture"', 'generator = "spiral"'),
])
def test_bad_configs_are_usage_errors(tmp_path, text):
    assert run("train", "--config", write_config(tmp_path, text=text), "--out", tmp_path / "o") == 2


def test_sample_is_reproducible(trained, tmp_path):
    for name in ("a", "b"):
        assert run("sample", "--ckpt", trained, "--n", 50, "--out", tmp_path / f"{name}.ebmd", "--seed", 4) == 0
    assert (tmp_path / "a.ebmd").read_bytes() == (tmp_path / "b.ebmd").read_bytes()
    assert load_dataset(tmp_path / "a.ebmd").shape == (2,)


def test_sample_zero_and_ancestral(trained, tmp_path):
    assert run("sample", "--ckpt", trained, "--n", 0, "--out", tmp_path / "e.ebmd") == 0
    assert load_dataset(tmp_path / "e.ebmd").n == 0
    assert run("sample", "--ckpt", trained, "--n", 6, "--steps", 0, "--out", tmp_path / "s.ebmd", "--seed", 2) == 0
    m = LatentEbm.load(trained)
    rng = stream(2, "sample")
    eps = [rng.standard_normal((6, d)) for d in m.prior.dims]
    z = m.prior.epsilon_transform(eps)
    ref = m.decoder.mean(z[0]).data.astype(np.float32)
    np.testing.assert_array_equal(load_dataset(tmp_path / "s.ebmd").data, ref)


def test_sample_records_chains(trained, tmp_path):
    prefix = tmp_path / "chains"
    assert run("sample", "--ckpt", trained, "--n", 3, "--steps", 20, "--record-chains", prefix,
               "--out", tmp_path / "s.ebmd") == 0
    rows = list(csv.reader(open(f"{prefix}_states.csv")))
    assert len(rows) - 1 == 3 * 3 * 2 * 2


def test_sample_image_grid(trained, tmp_path):
    assert run("sample", "--ckpt", trained, "--n", 4, "--image-shape", "1,2", "--out", tmp_path / "g.pgm") == 0
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_eval_ood_identical_sets_and_zero_llr(trained, tmp_path):
    assert run("gen-data", "--n", 300, "--centers=-2,0;2,0", "--out", tmp_path / "in.ebmd") == 0
    assert run("eval-ood", "--ckpt", trained, "--in-data", tmp_path / "in.ebmd", "--out-data", tmp_path / "in.ebmd",
               "--k", 0, "--n-mc", 1, "--report", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert abs(report["auroc"] - 0.5) < 0.05
    rows = list(csv.DictReader(open(tmp_path / "r.scores.csv")))
    assert len(rows) == 4 * 300
    assert all(float(r["score"]) == 0.0 for r in rows if r["score_type"] == "LLR")


def test_eval_ood_rejects_k_above_depth(trained, tmp_path):
    run("gen-data", "--n", 10, "--out", tmp_path / "d.ebmd")
    assert run("eval-ood", "--ckpt", trained, "--in-data", tmp_path / "d.ebmd", "--out-data", tmp_path / "d.ebmd",
               "--k", 3, "--report", tmp_path / "r.json") == 2


def test_eval_ood_is_thread_independent(trained, tmp_path):
    run("gen-data", "--n", 600, "--out", tmp_path / "a.ebmd", "--seed", 1)
    run("gen-data", "--n", 300, "--n-centers", 4, "--out", tmp_path / "b.ebmd", "--seed", 2)
    for t in (1, 2):
        assert run("eval-ood", "--ckpt", trained, "--in-data", tmp_path / "a.ebmd", "--out-data",
                   tmp_path / "b.ebmd", "--k", 2, "--n-mc", 1, "--steps", 3, "--threads", t,
                   "--report", tmp_path / f"r{t}.json") == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    assert (tmp_path / "r1.scores.csv").read_bytes() == (tmp_path / "r2.scores.csv").read_bytes()


def test_eval_ad(trained, tmp_path):
    run("gen-data", "--n", 200, "--n-centers", 3, "--out", tmp_path / "d.ebmd")
    assert run("eval-ad", "--ckpt", trained, "--data", tmp_path / "d.ebmd", "--heldout-label", 2,
               "--report", tmp_path / "r.json", "--scores", tmp_path / "s.csv") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["positive"] == "anomaly" and 0.0 <= report["auprc"] <= 1.0
    assert run("eval-ad", "--ckpt", trained, "--data", tmp_path / "d.ebmd", "--heldout-label", 7,
               "--report", tmp_path / "r.json") == 2


def test_eval_ad_needs_labels(trained, tmp_path):
    np.savetxt(tmp_path / "d.csv", np.ones((4, 2)), delimiter=",")
    assert run("eval-ad", "--ckpt", trained, "--data", tmp_path / "d.csv", "--heldout-label", 0,
               "--report", tmp_path / "r.json") == 2


@pytest.mark.parametrize("steps,thin,snapshots", [(40, 10, 5), (0, 10, 1), (25, 10, 3)])
def test_viz_latent_row_count(trained, tmp_path, steps, thin, snapshots):
    run("gen-data", "--n", 20, "--out", tmp_path / "d.ebmd")
    assert run("viz-latent", "--ckpt", trained, "--data", tmp_path / "d.ebmd", "--steps", steps, "--thin", thin,
               "--n-chains", 7, "--out", tmp_path / "v") == 0
    rows = list(csv.DictReader(open(tmp_path / "v" / "prior_chains.csv")))
    assert len(rows) == 7 * snapshots * 2
    assert {r["layer"] for r in rows} == {"1", "2"}
    codes = list(csv.DictReader(open(tmp_path / "v" / "posterior_codes.csv")))
    assert len(codes) == 20 * 2


def test_gradcheck_exit_codes(capsys):
    assert run("gradcheck", "--dims", "2,2") == 0
    assert "FAIL" not in capsys.readouterr().out
    assert run("gradcheck", "--dims", "2,2", "--inject-fault") == 1
    assert run("gradcheck", "--dims", "2,x") == 2


def test_missing_files_are_usage_errors(tmp_path):
    assert run("sample", "--ckpt", tmp_path / "nope", "--n", 1, "--out", tmp_path / "s.ebmd") == 2
    (tmp_path / "bad.ebmd").write_bytes(b"EBMD\0")
    assert run("eval-ad", "--ckpt", tmp_path / "nope", "--data", tmp_path / "bad.ebmd", "--heldout-label", 0,
               "--report", tmp_path / "r.json") == 2


def test_help_documents_flags(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["eval-ood", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--ckpt", "--in-data", "--out-data", "--k", "--n-mc", "--report", "--threads", "--seed"):
        assert flag in out


def test_gen_data_filters_labels(tmp_path):
    assert run("gen-data", "--n", 100, "--n-centers", 4, "--exclude-label", 1, "--out", tmp_path / "d.ebmd") == 0
    assert 1 not in set(load_dataset(tmp_path / "d.ebmd").labels)
    assert run("gen-data", "--n", 100, "--n-centers", 4, "--only-label", 3, "--out", tmp_path / "o.ebmd") == 0
    assert set(load_dataset(tmp_path / "o.ebmd").labels) == {3}


def test_divergence_exit_code(trained, tmp_path):
    assert run("sample", "--ckpt", trained, "--n", 5, "--space", "z", "--step-size", 1e6, "--steps", 50,
               "--out", tmp_path / "s.ebmd") == 3


def test_output_parent_directories_are_created(trained, tmp_path):
    assert run("sample", "--ckpt", trained, "--n", 3, "--out", tmp_path / "a" / "b" / "s.ebmd") == 0
    assert load_dataset(tmp_path / "a" / "b" / "s.ebmd").n == 3
