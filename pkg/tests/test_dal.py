import math

import numpy as np
import pytest
import torch

from gbdal import dal, nnkit, pgbs
from gbdal.errors import ConfigError, ContractError


def test_uniform_logits_give_log_k():
    regions = pgbs.region_map(8, 8, (3, 3))
    logits = torch.zeros(5, 8, 8)
    assert float(dal.local_domain_loss(logits, np.arange(9) % 5, regions)) == pytest.approx(math.log(5), abs=1e-14)
    assert float(dal.global_domain_loss(logits, [3])) == pytest.approx(math.log(5), abs=1e-14)


def test_confident_correct_logits_drive_loss_to_zero():
    regions = np.zeros((2, 2), dtype=int)
    values = []
    for margin in (1.0, 5.0, 20.0, 60.0):
        logits = torch.zeros(2, 2, 2)
        logits[1] = margin
        values.append(float(dal.local_domain_loss(logits, [1], regions)))
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-20


def test_local_loss_hand_computed():
    logits = torch.tensor([[[2.0, 0.0], [1.0, -1.0]], [[0.0, 1.0], [3.0, 0.5]]])  # [K=2, 2, 2]
    regions = np.array([[0, 1], [0, 1]])
    labels = [0, 1]  # left column -> 0, right column -> 1

    def nll(a, b, label):
        z = [a, b]
        return -(z[label] - math.log(math.exp(a) + math.exp(b)))

    expected = (nll(2, 0, 0) + nll(0, 1, 1) + nll(1, 3, 0) + nll(-1, 0.5, 1)) / 4
    assert float(dal.local_domain_loss(logits, labels, regions)) == pytest.approx(expected, abs=1e-14)
    expected_global = (nll(2, 0, 1) + nll(0, 1, 1) + nll(1, 3, 1) + nll(-1, 0.5, 1)) / 4
    assert float(dal.global_domain_loss(logits, [1])) == pytest.approx(expected_global, abs=1e-14)


def test_local_equals_global_for_constant_assignment():
    logits = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 5, 8, 8)))
    regions = pgbs.region_map(8, 8, (3, 3))
    local = dal.local_domain_loss(logits, [[4] * 9, [1] * 9], regions)
    glob = dal.global_domain_loss(logits, [4, 1])
    assert float(local) == pytest.approx(float(glob), abs=1e-14)


def test_losses_non_negative():
    rng = np.random.default_rng(1)
    regions = pgbs.region_map(8, 8, (3, 3))
    for _ in range(20):
        logits = torch.from_numpy(rng.normal(scale=5, size=(5, 8, 8)))
        assert float(dal.local_domain_loss(logits, rng.integers(0, 5, 9), regions)) >= 0
        assert float(dal.global_domain_loss(logits, [int(rng.integers(0, 5))])) >= 0


def test_label_out_of_range():
    with pytest.raises(ContractError):
        dal.global_domain_loss(torch.zeros(3, 2, 2), [3])
    with pytest.raises(ContractError):
        dal.local_domain_loss(torch.zeros(3, 2, 2), [-1], np.zeros((2, 2), dtype=int))


def test_total_loss():
    assert dal.total_loss(1.0, 0.5, 0.5, 0.0) == 1.0
    assert dal.total_loss(1.0, 0.5, 0.5, 0.1) == pytest.approx(1.1)
    assert dal.total_loss(1.0, 0.5, 0.5, 0.25) == pytest.approx(1.25)
    with pytest.raises(ConfigError):
        dal.total_loss(1.0, 0.5, 0.5, -0.1)


def _alignment_grad(model, x, lam):
    model.zero_grad()
    f = nnkit.forward_features(model, x)
    regions = pgbs.region_map(8, 8, (3, 3))
    local = dal.local_domain_loss(nnkit.forward_domain(model, f, 1.0, "local"), np.arange(9) % 5, regions)
    glob = dal.global_domain_loss(nnkit.forward_domain(model, f, 1.0, "global"), [2])
    logits, box = nnkit.forward_task(model, f)
    loss = dal.total_loss(nnkit.detection_loss(logits, box, [0], torch.zeros(4)), local, glob, lam)
    loss.backward()
    return model.conv1.weight.grad.clone()


def test_gradient_linear_in_lambda():
    model = nnkit.Detector(nnkit.ModelConfig(), seed=2)
    x = torch.from_numpy(np.random.default_rng(2).random((3, 32, 32)))
    g0, g1, g2 = (_alignment_grad(model, x, lam) for lam in (0.0, 0.1, 0.2))
    assert torch.allclose(g2 - g0, 2 * (g1 - g0), rtol=1e-8, atol=1e-14)


def test_adversarial_direction():
    """A step on the domain loss raises it for the extractor and lowers it for the head."""
    x = torch.from_numpy(np.random.default_rng(4).random((4, 3, 32, 32)))
    labels = [0, 1, 2, 3]

    def domain_loss(model):
        f = nnkit.forward_features(model, x)
        return dal.global_domain_loss(nnkit.forward_domain(model, f, 1.0, "global"), labels)

    for frozen, sign in (("domain", +1), ("conv", -1)):
        model = nnkit.Detector(nnkit.ModelConfig(), seed=0)
        before = float(domain_loss(model).detach())
        domain_loss(model).backward()
        with torch.no_grad():
            for name, p in model.named_parameters():
                if p.grad is not None and not name.startswith(frozen):
                    p -= 1e-2 * p.grad
        after = float(domain_loss(model).detach())
        assert sign * (after - before) > 0
