import csv
import json
import os
import time

import numpy as np
import pytest

from evnas.cli import main
from evnas.experiment import GENERATION_COLUMNS, read_generations_csv
from evnas.search_space import CellTopology, derive_genotype, genotype_from_json, genotype_to_json, init_arch_param

TINY = """\
seed = {seed}
preset = {preset}
output_dir = {out}
evolution.population_size = 4
evolution.generations = 2
evolution.tournament_size = 2
evolution.batches_per_generation = 4
supernet.cells = 2
supernet.channels = 4
train.batch_size = 8
data.image_size = 8
data.train_per_class = 8
data.val_per_class = 4
eval.batch_size = 8
"""


def write_cfg(tmp_path, name="tiny.cfg", seed=0, preset="full", out=None, extra=""):
    out = out or tmp_path / "run"
    path = tmp_path / name
    path.write_text(TINY.format(seed=seed, preset=preset, out=out) + extra)
    return path


@pytest.fixture(scope="module")
def searched(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("search")
    cfg = write_cfg(tmp, out=tmp / "nested" / "run")
    assert main(["search", str(cfg)]) == 0
    return cfg, tmp / "nested" / "run"


def test_search_writes_every_artifact(searched):
    _, out = searched
    names = {"generations.csv", "training.csv", "timing.csv", "best.genotype.json", "best.dot", "supernet.evns", "manifest.json"}
    assert names <= {p.name for p in out.iterdir()}
    rows = read_generations_csv(out / "generations.csv")
    assert list(rows[0]) == list(GENERATION_COLUMNS) and len(rows) == 2
    with open(out / "training.csv") as fh:
        training = list(csv.DictReader(fh))
    assert len(training) == 8
    assert [int(r["individual_index"]) for r in training[:4]] == [0, 1, 2, 3]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
    assert {"numpy", "python", "evnas"} <= set(manifest["versions"])
    genotype_from_json((out / "best.genotype.json").read_text())
    assert (out / "best.dot").read_text().startswith("digraph")


def test_manifest_config_reproduces_run(searched, tmp_path):
    _, out = searched
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = tmp_path / "again.cfg"
    cfg.write_text(manifest["config_text"])
    assert main(["search", str(cfg), "-o", str(tmp_path / "again")]) == 0
    for name in ("best.genotype.json", "generations.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again["config_hash"] == manifest["config_hash"]


def test_eval_reproduces_logged_elite_fitness(searched, capsys):
    cfg, out = searched
    capsys.readouterr()
    assert main(["eval", str(out / "supernet.evns"), str(out / "best.genotype.json"), "--config", str(cfg)]) == 0
    report = json.loads(capsys.readouterr().out)
    logged = float(read_generations_csv(out / "generations.csv")[-1]["best_fitness"])
    assert abs(report["fitness"] - logged) < 1e-6


def test_eval_on_idx_files(searched, tmp_path, capsys):
    from evnas.data import write_idx

    _, out = searched
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "img", rng.integers(0, 256, (6, 16, 16), dtype=np.uint8))
    write_idx(tmp_path / "lbl", np.array([0, 1, 2, 3, 0, 1], dtype=np.uint8))
    capsys.readouterr()
    argv = ["eval", str(out / "supernet.evns"), str(out / "best.genotype.json"), "--idx", str(tmp_path / "img"), str(tmp_path / "lbl"), "--input-size", "8"]
    assert main(argv) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 6


def test_eval_rejects_unknown_op(searched, tmp_path, capsys):
    cfg, out = searched
    obj = json.loads((out / "best.genotype.json").read_text())
    obj["normal"][0][1] = "conv_7x7"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    assert main(["eval", str(out / "supernet.evns"), str(bad), "--config", str(cfg)]) == 1
    assert "unknown operation 'conv_7x7'" in capsys.readouterr().err


def test_eval_rejects_topology_mismatch(searched, tmp_path, capsys):
    cfg, out = searched
    small = CellTopology(2, 2)
    g = derive_genotype(init_arch_param(np.random.default_rng(0), small), small)
    path = tmp_path / "small.json"
    path.write_text(genotype_to_json(g))
    assert main(["eval", str(out / "supernet.evns"), str(path), "--config", str(cfg)]) == 1
    assert "does not match checkpoint topology" in capsys.readouterr().err


def test_export_writes_dot(searched, tmp_path, capsys):
    _, out = searched
    assert main(["export", str(out / "best.genotype.json"), "-o", str(tmp_path / "g.dot")]) == 0
    assert (tmp_path / "g.dot").read_text() == (out / "best.dot").read_text()
    capsys.readouterr()
    assert main(["export", str(out / "best.genotype.json")]) == 0
    assert capsys.readouterr().out == (out / "best.dot").read_text()


def test_unwritable_output_is_an_explicit_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = write_cfg(tmp_path, out=blocker / "run")
    assert main(["search", str(cfg)]) == 1
    assert "cannot create output directory" in capsys.readouterr().err


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_output_dir(tmp_path, capsys):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        assert main(["search", str(write_cfg(tmp_path, out=ro))]) == 1
        assert "not writable" in capsys.readouterr().err
    finally:
        ro.chmod(0o700)


def test_bad_config_is_a_diagnostic(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("preset = full\n")
    assert main(["search", str(path)]) == 1
    assert "missing mandatory key 'seed'" in capsys.readouterr().err
    assert main(["search", str(tmp_path / "absent.cfg")]) == 1


def test_rand_preset_from_config(tmp_path):
    from evnas.config import load_config

    cfg = load_config(write_cfg(tmp_path, preset="rand"))
    assert cfg.evolution.random_mode and not cfg.evolution.enable_crossover and not cfg.evolution.enable_mutation


def test_surrogate_search_default_config_is_fast(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(f"seed = 0\noutput_dir = {tmp_path / 'sur'}\n")
    start = time.perf_counter()
    assert main(["surrogate-search", str(cfg)]) == 0
    assert time.perf_counter() - start < 10
    out = tmp_path / "sur"
    for name in ("generations.csv", "timing.csv", "best.genotype.json", "best.dot", "hidden_target.json", "manifest.json"):
        assert (out / name).exists()
    rows = read_generations_csv(out / "generations.csv")
    assert len(rows) == 50 and rows[-1]["total_evaluations"] == str(50 * 50)


def test_surrogate_noise_free_best_is_monotone(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(f"seed = 4\noutput_dir = {tmp_path / 'sur'}\nsurrogate.noise_std = 0\nevolution.generations = 20\n")
    assert main(["surrogate-search", str(cfg)]) == 0
    best = [float(r["best_fitness"]) for r in read_generations_csv(tmp_path / "sur" / "generations.csv")]
    assert all(b >= a for a, b in zip(best, best[1:]))


def test_surrogate_compare_summary(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(
        f"seed = 0\noutput_dir = {tmp_path / 'cmp'}\nevolution.population_size = 10\n"
        "evolution.generations = 5\nevolution.tournament_size = 3\n"
    )
    assert main(["surrogate-search", str(cfg), "--compare", "full,rand", "--seeds", "0-3"]) == 0
    summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2, 3]
    assert set(summary["final_best_fitness"]) == {"full", "rand"}
    assert all(len(v) == 4 for v in summary["final_best_fitness"].values())
    assert 0 <= summary["rank_sum"]["full>rand"]["p_value"] <= 1
    assert "rank-sum full>rand" in capsys.readouterr().out
    assert main(["surrogate-search", str(cfg), "--compare", "full,greedy"]) == 1


def test_multi_seed_writes_one_dir_per_seed(tmp_path):
    cfg = write_cfg(tmp_path, out=tmp_path / "multi")
    cfg.write_text(cfg.read_text().replace("evolution.generations = 2", "evolution.generations = 1"))
    assert main(["multi-seed", str(cfg), "--seeds", "0,1"]) == 0
    with open(tmp_path / "multi" / "seeds.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert (tmp_path / "multi" / "seed-1" / "supernet.evns").exists()
