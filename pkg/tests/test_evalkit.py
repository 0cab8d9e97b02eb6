import numpy as np
import pytest
import torch

from gbdal import evalkit, nnkit, trainer
from gbdal.errors import ConfigError, ContractError
from gbdal.synthgen import FactorSpec, generate_source, generate_target


@pytest.fixture(scope="module")
def target():
    return generate_target(FactorSpec(), 30, seed=2)


@pytest.fixture(scope="module")
def model():
    return nnkit.Detector(nnkit.ModelConfig(num_classes=3), seed=0)


def test_iou_cases():
    assert evalkit.box_iou([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2])[0] == pytest.approx(1.0)
    assert evalkit.box_iou([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1])[0] == 0.0
    # half-overlapping unit squares: 0.5 / 1.5
    assert evalkit.box_iou([0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2])[0] == pytest.approx(1 / 3)
    assert evalkit.box_iou([0.5, 0.5, -0.1, 0.2], [0.5, 0.5, 0.2, 0.2])[0] == 0.0


def test_perfect_oracle_scores_one(target):
    rep = evalkit.score_predictions(target.labels, target.boxes, target.labels, target.boxes)
    assert rep.accuracy == 1.0 and rep.score == 1.0 and rep.mean_iou == pytest.approx(1.0)


def test_wrong_boxes_score_zero(target):
    far = target.boxes.copy()
    far[:, 0] = np.where(far[:, 0] > 0.5, 0.05, 0.95)
    far[:, 2:] = 0.05
    rep = evalkit.score_predictions(target.labels, far, target.labels, target.boxes)
    assert rep.accuracy == 1.0 and rep.score == 0.0


def test_three_scene_fixture():
    boxes = np.array([[0.5, 0.5, 0.4, 0.4]] * 3)
    preds = boxes.copy()
    preds[2] = [0.1, 0.1, 0.05, 0.05]
    rep = evalkit.score_predictions([0, 1, 1], preds, [0, 2, 1], boxes)
    assert rep.score == pytest.approx(1 / 3)
    assert rep.accuracy == pytest.approx(2 / 3)


def test_evaluate_ranges(model, target):
    rep = evalkit.evaluate(model, target)
    assert 0 <= rep.accuracy <= 1 and 0 <= rep.mean_iou <= 1 and 0 <= rep.score <= rep.accuracy
    assert rep.n == 30


def test_evaluate_contract(model, target):
    with pytest.raises(ContractError):
        evalkit.evaluate(model, generate_target(FactorSpec(), 0, 0))
    with pytest.raises(ContractError):
        evalkit.evaluate(nnkit.Detector(nnkit.ModelConfig(num_classes=2)), target)


def test_fgsm_zero_is_identity(model, target):
    adv = evalkit.fgsm_split(model, target, 0.0)
    assert np.array_equal(adv.images, target.images) and adv.role == "target_adv"
    assert evalkit.evaluate(model, adv).score == evalkit.evaluate(model, target).score
    with pytest.raises(ConfigError):
        evalkit.fgsm_split(model, target, -1.0)


def test_fgsm_bounded_and_raises_loss(model, target):
    adv = evalkit.fgsm_split(model, target, 0.03)
    diff = np.abs(adv.images.astype(np.float64) - target.images)
    assert diff.max() <= 0.03 + 1e-6
    assert adv.images.min() >= 0 and adv.images.max() <= 1

    def loss(images):
        x = torch.from_numpy(images.astype(np.float64))
        with torch.no_grad():
            logits, _ = nnkit.forward_task(model, nnkit.forward_features(model, x))
        return float(nnkit.classification_loss(logits, target.labels))

    assert loss(adv.images) > loss(target.images)


def test_robustness_suite(model, target):
    suite = evalkit.robustness_suite(model, target, eps_eval=0.0, sigma=0.0)
    assert set(suite) == {"clean", "adv", "gauss"}
    assert suite["clean"].score == suite["adv"].score == suite["gauss"].score


def test_ablation_matrix_shape(monkeypatch, target):
    def fake_train(config, sources, **kw):
        return trainer.TrainResult(nnkit.Detector(nnkit.ModelConfig()), {}, None, None)

    monkeypatch.setattr(evalkit, "train", fake_train)
    rows = evalkit.ablation_matrix(trainer.TrainConfig(), [target], target, seeds=range(10))
    assert len(evalkit.ABLATION_VARIANTS) == 6
    assert len(rows) == 60
    assert {r["variant"] for r in rows} == set(evalkit.ABLATION_VARIANTS)
    summary = evalkit.summarize(rows)
    assert len(summary) == 6 and all(s["n"] == 10 for s in summary)


def test_sweep_rows(monkeypatch, target):
    seen = []

    def fake_train(config, sources, **kw):
        seen.append(config.K)
        return trainer.TrainResult(nnkit.Detector(nnkit.ModelConfig()), {}, None, None)

    monkeypatch.setattr(evalkit, "train", fake_train)
    rows = evalkit.sweep("K", [2, 3, 5, 7, 9], trainer.TrainConfig(), [target], target)
    assert len(rows) == 5 and seen == [2, 3, 5, 7, 9]
    with pytest.raises(ConfigError):
        evalkit.sweep("lr", [1], trainer.TrainConfig(), [target], target)


def test_summarize_standard_error():
    rows = [{"variant": "a", "score": s} for s in (0.1, 0.2, 0.3, 0.4)]
    (s,) = evalkit.summarize(rows)
    assert s["mean"] == pytest.approx(0.25)
    assert s["se"] == pytest.approx(np.std([0.1, 0.2, 0.3, 0.4], ddof=1) / 2)


def test_render_table():
    text = evalkit.render_table([{"variant": "erm", "score": 0.5}, {"variant": "gbdal", "score": 0.75}])
    lines = text.splitlines()
    assert lines[0].split() == ["variant", "score"]
    assert lines[2].split() == ["erm", "0.5000"]


def test_short_training_beats_untrained_model():
    spec = FactorSpec()
    sources = [generate_source(spec, d, 150, seed=1) for d in range(2)]
    cfg = trainer.TrainConfig(batch_size=16, lr=0.01, momentum=0.9, epochs=4, init_gain=6 ** 0.5).with_variant("erm")
    result = trainer.train(cfg, sources)
    before = evalkit.evaluate(nnkit.Detector(result.model.config, seed=0), sources[0]).mean_iou
    assert evalkit.evaluate(result.model, sources[0]).mean_iou > before
