import json

import numpy as np
import pytest
import torch

from gbdal import dal, nnkit, trainer
from gbdal.errors import ConfigError, FormatError, NumericalError
from gbdal.synthgen import FactorSpec, generate_source

SPEC = FactorSpec()


@pytest.fixture(scope="module")
def sources():
    return [generate_source(SPEC, d, 24, seed=5) for d in range(2)]


def _cfg(variant="gbdal-snf", **kw):
    base = dict(batch_size=4, lr=0.01, momentum=0.9, epochs=2, seed=3)
    base.update(kw)
    return trainer.TrainConfig(**base).with_variant(variant)


def test_variant_flags():
    erm = trainer.TrainConfig().with_variant("erm")
    assert not (erm.use_local_dal or erm.use_global_dal or erm.use_snf_sim or erm.use_snf_aug)
    full = trainer.TrainConfig().with_variant("gbdal-snf")
    assert full.use_local_dal and full.use_global_dal and full.use_snf_sim and full.use_snf_aug
    assert trainer.TrainConfig().with_variant("dal").domain_labels == "dataset"
    with pytest.raises(ConfigError):
        trainer.TrainConfig().with_variant("nope")


@pytest.mark.parametrize("kw", [dict(K=1), dict(lam=-1.0), dict(epsilon=0.0), dict(use_snf_sim=False, use_snf_aug=True),
                                dict(domain_labels="x"), dict(lr=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        trainer.TrainConfig(**kw)


def test_lr_schedule():
    c = trainer.TrainConfig(epochs=10, lr=0.1)
    assert c.decay_epoch == 7
    assert c.lr_at(6) == 0.1 and c.lr_at(7) == pytest.approx(0.01)


def test_epoch_batches_cover_every_scene(sources):
    batches = trainer.epoch_batches(sources, 5, seed=0, epoch=0)
    assert [d for d, _ in batches[:4]] == [0, 1, 0, 1]
    for d in range(2):
        idx = np.concatenate([b for dd, b in batches if dd == d])
        assert sorted(idx) == list(range(24))
    assert len(batches) == trainer.steps_per_epoch(sources, 5)


def test_erm_matches_plain_loop(sources):
    """With every alignment flag off the loop is plain SGD on the detection loss."""
    cfg = _cfg("erm", epochs=1)
    result = trainer.train(cfg, sources)

    model = nnkit.Detector(trainer._model_config(cfg, sources), seed=cfg.seed)
    velocity = {}
    for d, idx in trainer.epoch_batches(sources, cfg.batch_size, cfg.seed, 0):
        split = sources[d]
        x = torch.from_numpy(split.images[idx].astype(np.float64))
        logits, box = nnkit.forward_task(model, nnkit.forward_features(model, x))
        loss = nnkit.detection_loss(logits, box, split.labels[idx], nnkit.encode_boxes(split.boxes[idx], model.config))
        loss.backward()
        nnkit.apply_sgd(model, cfg.lr_at(0), cfg.momentum, velocity)
    for (n1, p1), (_, p2) in zip(result.model.named_parameters(), model.named_parameters()):
        assert torch.equal(p1, p2), n1


def test_records_are_deterministic(sources):
    a = trainer.train(_cfg(), sources, max_steps=8)
    b = trainer.train(_cfg(), sources, max_steps=8)
    assert a.record.rows == b.record.rows
    assert json.dumps(a.record.rows, sort_keys=True) == json.dumps(b.record.rows, sort_keys=True)
    c = trainer.train(_cfg(seed=4), sources, max_steps=8)
    assert c.record.rows != a.record.rows


def test_phase_order_and_row_fields(sources):
    rows = trainer.train(_cfg(), sources, max_steps=3).record.rows
    for r in rows:
        assert r["phases"] == ["snf", "gbdal", "supervised"]
        for key in ("L_det", "L_local", "L_global", "L_total", "lr", "dataset", "domain_acc"):
            assert key in r
    assert [r["step"] for r in rows] == [0, 1, 2]
    erm_rows = trainer.train(_cfg("erm"), sources, max_steps=2).record.rows
    assert erm_rows[0]["phases"] == ["supervised"]
    assert erm_rows[0]["L_local"] == 0.0 and erm_rows[0]["L_global"] == 0.0


def test_total_loss_combines_terms(sources):
    for r in trainer.train(_cfg(lam=0.25), sources, max_steps=6).record.rows:
        assert r["L_total"] == pytest.approx(r["L_det"] + 0.25 * (r["L_local"] + r["L_global"]), rel=1e-12)


def test_resume_matches_straight_run(sources, tmp_path):
    cfg = _cfg(epochs=20)
    straight = trainer.train(cfg, sources, max_steps=40)
    trainer.train(cfg, sources, run_dir=tmp_path, max_steps=20, checkpoint_steps=[20])
    loaded_cfg, state = trainer.load_checkpoint(tmp_path / "checkpoints" / "step_000020.ckpt")
    assert loaded_cfg == cfg and state.step == 20
    resumed = trainer.train(loaded_cfg, sources, max_steps=40, state=state)
    for (n1, p1), (_, p2) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p1, p2), n1
    assert straight.record.rows[20:] == resumed.record.rows
    for level in ("local", "global"):
        assert np.array_equal(straight.banks[level].prototypes, resumed.banks[level].prototypes)


def test_records_jsonl_written(sources, tmp_path):
    result = trainer.train(_cfg(), sources, run_dir=tmp_path, max_steps=4)
    lines = (tmp_path / "records.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == json.loads(json.dumps(result.record.rows))
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()


def test_corrupt_checkpoint(sources, tmp_path):
    trainer.train(_cfg(), sources, run_dir=tmp_path, max_steps=2)
    path = tmp_path / "checkpoints" / "final.ckpt"
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(FormatError):
        trainer.load_checkpoint(path)
    params = tmp_path / "p.ckpt"
    nnkit.save_params(nnkit.Detector(nnkit.ModelConfig()), params)
    with pytest.raises(FormatError):
        trainer.load_checkpoint(params)


def test_sim_only_feeds_adversarial_features_to_splitter(sources, monkeypatch):
    seen = []
    real = trainer.pgbs.split

    def spy(bank, buffer, new, rng, *a, **kw):
        seen.append(len(new))
        return real(bank, buffer, new, rng, *a, **kw)

    monkeypatch.setattr(trainer.pgbs, "split", spy)
    trainer.train(_cfg("gbdal"), sources, max_steps=1)
    trainer.train(_cfg("gbdal-sim"), sources, max_steps=1)
    # local (4 images x 9 regions) then global (4 images); doubled when simulation is on
    assert seen == [36, 4, 72, 8]


def test_sim_without_aug_keeps_detection_loss_clean(sources):
    sim = trainer.train(_cfg("gbdal-sim"), sources, max_steps=1).record.rows[0]
    plain = trainer.train(_cfg("gbdal"), sources, max_steps=1).record.rows[0]
    assert sim["L_det"] == plain["L_det"]
    aug = trainer.train(_cfg("gbdal-snf"), sources, max_steps=1).record.rows[0]
    assert aug["L_det"] != plain["L_det"]


def test_dal_baseline_uses_dataset_labels(sources, monkeypatch):
    calls = []
    monkeypatch.setattr(trainer.pgbs, "split", lambda *a, **k: calls.append(1))
    result = trainer.dal_baseline_train(_cfg("gbdal"), sources, max_steps=4)
    assert not calls
    assert result.model.config.num_domains == 2
    assert all(r["L_global"] > 0 for r in result.record.rows)


def test_single_source_dal_baseline_is_degenerate(sources):
    """One source gives one domain label: the head can only learn a constant."""
    result = trainer.train(_cfg("dal", epochs=3), sources[:1])
    assert result.model.config.num_domains == 1
    assert all(r["L_global"] == 0.0 for r in result.record.rows)


def test_splitter_deferral_is_recorded(sources):
    cfg = _cfg("gbdal", K=40, batch_size=2)
    rows = trainer.train(cfg, sources, max_steps=2).record.rows
    assert rows[0]["deferred_global"] is True  # 2 features < 40 clusters


def test_non_finite_loss_raises(sources):
    cfg = _cfg("erm", lr=1e300)
    with pytest.raises(NumericalError):
        trainer.train(cfg, sources, max_steps=10)


def test_empty_sources_rejected(sources):
    with pytest.raises(ConfigError):
        trainer.train(_cfg(), [])
