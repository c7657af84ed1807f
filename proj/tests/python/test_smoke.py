"""Python smoke tests against the compiled extension."""

import math
import os
import sys

import numpy as np
import pytest

module_dir = os.environ.get("VQAT2I_MODULE_DIR")
if module_dir:
    sys.path.insert(0, module_dir)

vqat2i = pytest.importorskip("_vqat2i")


def test_text_operations():
    assert vqat2i.concatenate_qa("Is the bus blue?", "yes") == "is the bus blue? yes"
    assert vqat2i.majority_answer(["yes", "yes", "no"]) == "yes"
    assert vqat2i.majority_answer(["a", "b"]) == "a"
    assert vqat2i.tokenize("A Red  Circle.") == ["a", "red", "circle."]
    vocab = vqat2i.build_vocabulary(["a cat", "a dog"], 1)
    assert set(vocab[3:]) == {"a", "cat", "dog"}


def test_inception_score_bounds():
    uniform = np.full((10, 4), 0.25)
    mean, std = vqat2i.inception_score(uniform, 2)
    assert abs(mean - 1.0) < 1e-9
    one_hot = np.eye(6)
    mean, _ = vqat2i.inception_score(one_hot, 1)
    assert abs(mean - 6.0) < 1e-9


def test_fid_closed_form():
    n = 16
    unit = math.sqrt((n - 1) / n)
    base = np.array([unit if i % 2 == 0 else -unit for i in range(n)])[:, None]
    assert abs(vqat2i.fid(base + 0.0, base + 3.0) - 9.0) < 1e-6
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 5))
    assert abs(vqat2i.fid(x, x.copy())) < 1e-6


def test_r_precision_oracle_encoder():
    rng = np.random.default_rng(1)
    captions = rng.normal(size=(30, 8))
    score = vqat2i.r_precision(captions.copy(), captions, list(range(30)), 20, 7)
    assert score == 1.0


def test_vqa_loss_examples():
    assert vqat2i.vqa_loss([1.0, 0.0], [0]) == 0.0
    loss = vqat2i.vqa_loss([math.exp(-1), math.exp(-2)], [0, 1])
    assert abs(loss - 1.5) < 1e-12
    consensus, top1 = vqat2i.vqa_accuracy(["yes"], [["yes", "yes", "yes", "no"]])
    assert consensus == 1.0 and top1 == 1.0


def test_loss_assembly_matches_equations():
    report = vqat2i.generator_loss(
        caption_uncond_probs=[[0.8]],
        caption_cond_probs=[[0.9]],
        qa_uncond_probs=[[0.5]],
        qa_cond_probs=[[0.4]],
        variant="adapted",
        kl_weight=0.0,
    )
    expect = -(math.log(0.8) + math.log(0.5) + math.log(0.9) + math.log(0.4))
    assert abs(report["total_g"] - expect) < 1e-9

    d = vqat2i.discriminator_loss(
        real_uncond_probs=[[0.9]],
        real_cond_probs=[[0.8]],
        caption_uncond_probs=[[0.2]],
        caption_cond_probs=[[0.1]],
        qa_uncond_probs=[[0.3]],
        qa_cond_probs=[[0.25]],
        variant="adapted",
    )
    expect_d = (
        -math.log(0.9)
        - math.log(1 - 0.2)
        - math.log(1 - 0.3)
        - math.log(0.8)
        - math.log(1 - 0.1)
        - math.log(1 - 0.25)
    )
    assert abs(d["total_d"] - expect_d) < 1e-9


def test_synthetic_dataset_and_cli(tmp_path):
    summary = vqat2i.generate_synthetic_dataset(str(tmp_path / "data"), 8, seed=5)
    assert summary["n_images"] == 8
    assert summary["n_complementary"] > 0
    assert (tmp_path / "data" / "manifest.jsonl").exists()
    code = vqat2i.run_cli(
        ["synth-data", "--n", "4", "--seed", "9", "--data", str(tmp_path / "data2")]
    )
    assert code == 0
    assert vqat2i.run_cli(["train", "--set", "bogus_key=1", "--print-config"]) == 1
