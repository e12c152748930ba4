import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_generator

from facemanifold.errors import ConfigError
from facemanifold.harness import (
    ExperimentConfig,
    LabeledImages,
    RunManifest,
    build_fake_corpus,
    build_real_corpus,
)
from facemanifold.harness.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, main
from facemanifold.harness.experiments import read_table, resolve_method

TINY = {
    "n_train": 24, "n_val": 8, "n_test": 8, "n_attack": 6,
    "generator": {"d_z": 16, "d_w": 16, "mapping_depth": 2, "resolutions": [8, 16],
                  "feature_channels": [8, 4]},
    "gan": {"steps": 3, "batch_size": 8},
    "detector": {"epochs": 1, "batch_size": 8},
    "pgd": {"iters": 3},
    "manifold": {"max_iters": 3},
    "snapshot_samples": 2,
}
TABLES = [f"table{i}.csv" for i in range(1, 6)]


class TestRealCorpus:
    def test_labels_and_range(self):
        corpus = build_real_corpus(0, 12, 16)
        assert corpus.images.shape == (12, 3, 16, 16)
        assert torch.all(corpus.labels == 0)
        assert corpus.images.min() >= 0 and corpus.images.max() <= 1

    def test_deterministic(self):
        assert torch.equal(build_real_corpus(5, 4).images, build_real_corpus(5, 4).images)

    def test_image_depends_only_on_its_seed(self):
        wide, narrow = build_real_corpus(10, 6), build_real_corpus(13, 2)
        assert torch.equal(wide.images[3:5], narrow.images)

    def test_images_vary(self):
        images = build_real_corpus(0, 8).images
        assert all(not torch.equal(images[0], images[i]) for i in range(1, 8))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_real_corpus(0, 0)


class TestFakeCorpus:
    def test_labels_range_seeds(self):
        gen = tiny_generator(dtype=torch.float32)
        corpus = build_fake_corpus(gen, 100, 5)
        assert torch.all(corpus.labels == 1)
        assert corpus.images.min() >= 0 and corpus.images.max() <= 1
        assert corpus.seeds.tolist() == [100, 101, 102, 103, 104]

    def test_untrained_generator_differs_from_reals(self):
        gen = tiny_generator(dtype=torch.float32, resolutions=(4, 8, 16, 32), feature_channels=(4, 4, 4, 3))
        fake = build_fake_corpus(gen, 0, 64).images.mean().item()
        real = build_real_corpus(0, 64).images.mean().item()
        assert abs(fake - real) > 0.01

    def test_requires_generator(self):
        with pytest.raises(ValueError):
            build_fake_corpus(None, 0, 3)


def test_labeled_images_round_trip(tmp_path):
    corpus = build_real_corpus(0, 3, 8)
    corpus.save(tmp_path / "c.npz")
    loaded = LabeledImages.load(tmp_path / "c.npz")
    assert torch.equal(loaded.images, corpus.images)
    assert torch.equal(loaded.labels, corpus.labels)
    assert np.array_equal(loaded.seeds, corpus.seeds)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.n_train, cfg.n_val, cfg.n_test, cfg.n_attack) == (2000, 500, 500, 500)
        assert cfg.manifold_config("latent+noise").eps_latent == 0.004
        assert cfg.manifold_config("latent+noise").eps_noise == 0.05
        assert cfg.pgd_config("linf").iters == 40
        assert cfg.fgsm_config().alpha == 0.3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 100_000), st.integers(1, 100_000),
           st.integers(1, 100_000), st.integers(1, 100_000))
    def test_seed_partitions_disjoint(self, seed, n_train, n_val, n_test, n_attack):
        cfg = ExperimentConfig(seed=seed, n_train=n_train, n_val=n_val, n_test=n_test, n_attack=n_attack)
        spans = sorted(cfg.seed_ranges().values())
        assert all(a + n <= b for (a, n), (b, _) in zip(spans, spans[1:]))

    def test_component_seeds_distinct(self):
        cfg = ExperimentConfig(seed=4)
        seeds = [cfg.component_seed(c) for c in ("gan", "A", "B", "perceptual")]
        assert len(set(seeds)) == 4

    @pytest.mark.parametrize("values", [
        {"n_train": 0}, {"n_attack": -1}, {"n_val": 100_001}, {"colour": "blue"},
        {"generator": {"bogus": 1}}, {"pgd": {"alpha": 0.5}}, {"manifold": {"max_iters": 0}},
        {"quality_detector": "C"}, {"seed": -1}, {"detector": {"epochs": 0}},
    ])
    def test_invalid(self, values):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(values)

    def test_round_trip_and_hash(self, tmp_path):
        cfg = ExperimentConfig.from_dict(TINY)
        cfg.save(tmp_path / "c.json")
        again = ExperimentConfig.load(tmp_path / "c.json")
        assert again.config_hash() == cfg.config_hash()
        assert ExperimentConfig.from_dict({**TINY, "seed": 1}).config_hash() != cfg.config_hash()

    def test_malformed_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError, match="bad.json"):
            ExperimentConfig.load(tmp_path / "bad.json")

    def test_nested_sections_merge_over_defaults(self):
        cfg = ExperimentConfig.from_dict({"pgd": {"iters": 5}})
        assert cfg.pgd_config("linf").iters == 5
        assert cfg.pgd_config("linf").eps_max == 0.3


@pytest.mark.parametrize("name,expected", [
    ("pgd-l2", ("pgd", "l2")), ("noise+latent@3", ("manifold", "latent+noise")),
    ("ensemble-alternating", ("manifold", "latent+noise")), ("noise-level-2", ("manifold", "noise-level-2")),
])
def test_resolve_method(name, expected):
    assert resolve_method(name) == expected


class TestCLIErrors:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_malformed_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("[1, 2")
        assert main(["table1", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "c.json" in capsys.readouterr().err

    def test_missing_detector_checkpoint(self, tmp_path, capsys, pipeline):
        cfg = {**TINY, "generator_checkpoint": str(pipeline / "checkpoints" / "generator.pt"),
               "detector_checkpoints": {"A": str(tmp_path / "nowhere" / "detA.pt")}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code = main(["attack", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")])
        err = capsys.readouterr().err
        assert code == EXIT_CHECKPOINT
        assert "detA.pt" in err and "attack" in err

    def test_missing_generator_checkpoint(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps(TINY))
        assert main(["attack", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == EXIT_CHECKPOINT
        assert "generator.pt" in capsys.readouterr().err

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT}) == 4


def _run_pipeline(out, config_path):
    assert main(["all", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_path):
    return _run_pipeline(tmp_path_factory.mktemp("run1"), config_path)


class TestPipeline:
    def test_layout(self, pipeline):
        for rel in ["checkpoints/generator.pt", "checkpoints/detector_A.pt", "checkpoints/detector_B.pt",
                    "checkpoints/perceptual.pt", "corpora/real_train.npz", "corpora/fake_test.npz",
                    "manifest.json", "report.md", "config.json"]:
            assert (pipeline / rel).exists(), rel
        for table in TABLES:
            assert (pipeline / "tables" / table).exists()
            assert (pipeline / "tables" / table).with_suffix(".json").exists()
        assert (pipeline / "attacks" / "noise+latent_A" / "sample_0_step_0.png").exists()
        _, t5 = read_table(pipeline / "tables" / "table5.csv")
        assert (pipeline / "tables" / "table5_grid.png").exists() == (int(t5[0][1]) > 0)

    def test_rerun_is_byte_identical(self, pipeline, config_path, tmp_path):
        again = _run_pipeline(tmp_path / "run2", config_path)
        for table in TABLES:
            assert (pipeline / "tables" / table).read_bytes() == (again / "tables" / table).read_bytes()

    def test_manifest_integrity(self, pipeline):
        manifest = RunManifest(pipeline)
        assert manifest.verify() == []
        assert set(manifest.tables) == {f"table{i}" for i in range(1, 6)}
        assert manifest.config_hash == ExperimentConfig.from_dict(TINY).config_hash()
        assert any("table5" in w for w in manifest.warnings)  # 6 attacks < 50 matched

    def test_manifest_detects_tampering(self, pipeline, tmp_path):
        import shutil

        copy = tmp_path / "copy"
        shutil.copytree(pipeline, copy)
        (copy / "tables" / "table1.csv").write_text("tampered\n")
        assert RunManifest(copy).verify() == ["tables/table1.csv"]

    def test_row_structure(self, pipeline):
        header, rows = read_table(pipeline / "tables" / "table1.csv")
        assert header == ["attack", "A", "B"]
        assert [r[0] for r in rows] == ["clean", "pgd-linf", "pgd-l2", "fgsm", "noise", "latent", "noise+latent"]
        _, rows4 = read_table(pipeline / "tables" / "table4.csv")
        assert [r[0] for r in rows4] == ["none", "level-1", "level-2"]
        _, rows3 = read_table(pipeline / "tables" / "table3.csv")
        assert [r[0] for r in rows3] == ["loss-sum", "logit-fusion", "alternating"]

    def test_no_attack_row_equals_clean(self, pipeline):
        _, t1 = read_table(pipeline / "tables" / "table1.csv")
        _, t4 = read_table(pipeline / "tables" / "table4.csv")
        assert t4[0][1:] == t1[0][1:]

    def test_transfer_diagonal_matches_whitebox(self, pipeline):
        _, t1 = read_table(pipeline / "tables" / "table1.csv")
        _, t2 = read_table(pipeline / "tables" / "table2.csv")
        whitebox = {r[0]: r[1:] for r in t1}
        for method, source, a, b in t2[1:]:
            if method in ("pgd-linf", "fgsm"):
                assert {"A": a, "B": b}[source] == whitebox[method]["AB".index(source)]

    def test_quality_reference_row(self, pipeline):
        _, t5 = read_table(pipeline / "tables" / "table5.csv")
        ref = t5[0]
        assert ref[0] == "reference"
        if int(ref[1]) > 0:
            assert float(ref[2]) == 0.0 and float(ref[4]) == 1.0 and float(ref[5]) == 0.0

    def test_records_sorted_with_seeds(self, pipeline):
        lines = (pipeline / "attacks" / "pgd-linf_A" / "records.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["sample"] for r in records] == list(range(TINY["n_attack"]))
        cfg = ExperimentConfig.from_dict(TINY)
        start, _ = cfg.seed_ranges()["attack"]
        assert [r["seed"] for r in records] == [start + i for i in range(TINY["n_attack"])]
        assert all(r["linf"] <= 0.3 for r in records)

    def test_report_collates_tables(self, pipeline):
        text = (pipeline / "report.md").read_text()
        for i in range(1, 6):
            assert f"## table{i}" in text

    def test_single_stage_reuses_outputs(self, pipeline, config_path, capsys):
        before = (pipeline / "tables" / "table1.csv").read_bytes()
        assert main(["table1", "--config", str(config_path), "--out", str(pipeline)]) == EXIT_OK
        assert (pipeline / "tables" / "table1.csv").read_bytes() == before
        assert capsys.readouterr().out.startswith("attack,A,B")
