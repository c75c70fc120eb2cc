import logging

import numpy as np
import pytest

from fedwarm import models
from fedwarm.datahub import ClientDataset, LabeledDataset
from fedwarm.localtrain import (
    ClientState,
    LocalHyper,
    LRSchedule,
    ServerCtx,
    local_train,
    sample_epoch_batches,
)
from fedwarm.models import Batch, ModelSpec
from fedwarm.numkit import derive_stream
from fedwarm.server import Simulator, TrainSettings, _Session

from .conftest import quadratic_clients

SPEC = ModelSpec("softmax_linear", 2, 4)


def client(blobs, n=30, cid=0, offset=0):
    return ClientDataset(cid, np.arange(offset, offset + n), 0, blobs)


def start(spec=SPEC, seed=0):
    return models.init_params(spec, derive_stream(seed, ("init",)))


def run(blobs, hyper, ctx=None, state=None, seed=3, data=None):
    data = data or client(blobs)
    return local_train(SPEC, start(), ctx, data, hyper, state, derive_stream(seed, ("local",)))


# ------------------------------------------------------------ batches


def test_full_batch_is_permutation_of_all():
    parent = LabeledDataset(np.eye(4), [0, 1, 0, 1], 2)
    c = ClientDataset(0, [0, 1, 2, 3], 0, parent)
    for b in sample_epoch_batches(c, 4, derive_stream(0, ()), steps=5):
        assert np.array_equal(b.index, [0, 1, 2, 3])


def test_small_batches_have_distinct_indices(blobs):
    c = client(blobs, n=10)
    batches = sample_epoch_batches(c, 3, derive_stream(0, ()), steps=20)
    assert len(batches) == 20
    for b in batches:
        assert len(b) == 3 and len(set(b.index.tolist())) == 3
        assert set(b.index.tolist()) <= set(c.indices.tolist())


def test_batches_deterministic(blobs):
    c = client(blobs, n=10)
    a = sample_epoch_batches(c, 4, derive_stream(5, ()), steps=6)
    b = sample_epoch_batches(c, 4, derive_stream(5, ()), steps=6)
    assert all(np.array_equal(x.index, y.index) for x, y in zip(a, b))


def test_batch_errors(blobs):
    with pytest.raises(ValueError):
        sample_epoch_batches(client(blobs), 0, derive_stream(0, ()))
    with pytest.raises(ValueError):
        sample_epoch_batches(ClientDataset(0, [], 0, blobs), 2, derive_stream(0, ()))


# ------------------------------------------------------------ local training


def test_fedprox_with_zero_mu_is_fedavg(blobs):
    a, _, _ = run(blobs, LocalHyper(0.1, 7, 8))
    b, _, _ = run(blobs, LocalHyper(0.1, 7, 8, "fedprox", prox_mu=0.0))
    assert a.tobytes() == b.tobytes()


def test_fedacg_with_zero_beta_and_start_anchor_is_fedavg(blobs):
    a, _, _ = run(blobs, LocalHyper(0.1, 7, 8))
    b, _, _ = run(blobs, LocalHyper(0.1, 7, 8, "fedacg", acg_beta=0.0), ServerCtx(anchor=start()))
    assert a.tobytes() == b.tobytes()


def test_fedprox_pulls_toward_start(blobs):
    a, _, _ = run(blobs, LocalHyper(0.2, 20, 8))
    b, _, _ = run(blobs, LocalHyper(0.2, 20, 8, "fedprox", prox_mu=5.0))
    assert np.linalg.norm(b - start()) < np.linalg.norm(a - start())


def test_single_full_batch_step_is_gradient_descent(blobs):
    c = client(blobs, n=12)
    w0 = start()
    w1, _, cost = run(blobs, LocalHyper(0.3, 1, 12), data=c)
    g = models.grad(SPEC, w0, Batch(c.features, c.labels, c.indices))
    assert np.max(np.abs(w1 - (w0 - 0.3 * g))) <= 1e-15
    assert (cost.epochs, cost.grad_evals, cost.samples) == (1, 1, 12)


def test_cost_counts_local_steps(blobs):
    _, _, cost = run(blobs, LocalHyper(0.1, 9, 5))
    assert cost.epochs == 9 and cost.samples == 45


def test_quadratic_forward_then_backward_step():
    # step with eta, then with -eta on the same batch: an affine map with factor (1 - eta^2)
    spec = ModelSpec("quadratic", 3)
    parent, clients = quadratic_clients([[1.0, 2.0, -1.0]])
    w0 = np.array([0.5, -0.25, 4.0])
    eta = 0.3
    w1, _, _ = local_train(spec, w0, None, clients[0], LocalHyper(eta, 1, 1), None, derive_stream(0, ()))
    g = w1 - parent.features[0]
    w2 = w1 + eta * g
    c = parent.features[0]
    assert np.allclose(w2, c + (1 - eta**2) * (w0 - c), atol=1e-9)
    # undoing with the step's own gradient returns exactly to the start
    assert np.allclose(w1 + eta * (w0 - c), w0, atol=1e-9)


def test_scaffold_option_two_update(blobs):
    M = SPEC.param_count
    rng = derive_stream(8, ())
    c_glob, c_i = rng.normal(size=M) * 0.01, rng.normal(size=M) * 0.01
    hyper = LocalHyper(0.05, 4, 10, "scaffold")
    w, st, _ = run(blobs, hyper, ServerCtx(control_variate=c_glob), ClientState(c_i))
    expected = c_i - c_glob + (start() - w) / (4 * 0.05)
    assert np.allclose(st.control_variate, expected, atol=1e-15)


def test_scaffold_with_zero_variates_matches_fedavg_step(blobs):
    M = SPEC.param_count
    a, _, _ = run(blobs, LocalHyper(0.1, 5, 6))
    b, st, _ = run(blobs, LocalHyper(0.1, 5, 6, "scaffold"), ServerCtx(control_variate=np.zeros(M)))
    assert a.tobytes() == b.tobytes()
    assert st.control_variate.shape == (M,)


def test_scaffold_round_on_identical_clients_equals_fedavg(blobs):
    idx = np.arange(20)
    clients = [ClientDataset(k, idx, 0, blobs) for k in range(3)]
    M = SPEC.param_count
    out = {}
    for alg in ("fedavg", "scaffold"):
        sim = Simulator(SPEC, TrainSettings(algorithm=alg, local_steps=(4,), batch_size=20))
        _, w_new, _, _ = sim.global_round(start(), clients, _Session(M), 0.1, (4,), 20, (0, 0), clients)
        out[alg] = w_new
    assert out["fedavg"].tobytes() == out["scaffold"].tobytes()


def test_distillation_changes_the_trajectory(blobs):
    anchor = start(seed=9) * 40
    a, _, _ = run(blobs, LocalHyper(0.1, 5, 8))
    b, _, _ = run(blobs, LocalHyper(0.1, 5, 8, kl_coefficient=1.0, distill_anchor=anchor))
    c, _, _ = run(blobs, LocalHyper(0.1, 5, 8, kl_coefficient=0.0, distill_anchor=anchor))
    assert not np.array_equal(a, b)
    assert a.tobytes() == c.tobytes()


def test_clamped_batch_is_logged(blobs, caplog):
    with caplog.at_level(logging.DEBUG, logger="fedwarm.localtrain"):
        _, _, cost = run(blobs, LocalHyper(0.1, 2, 50), data=client(blobs, n=6))
    assert cost.samples == 12
    assert "clamping" in caplog.text


@pytest.mark.parametrize(
    "hyper,ctx",
    [
        (LocalHyper(0.1, 1, 4, "scaffold"), None),
        (LocalHyper(0.1, 1, 4, "fedacg"), None),
        (LocalHyper(0.1, 1, 4, "scaffold"), ServerCtx(control_variate=np.zeros(3))),
        (LocalHyper(0.1, 1, 4, "fedacg"), ServerCtx(anchor=np.zeros(3))),
    ],
)
def test_missing_or_mismatched_server_context(blobs, hyper, ctx):
    with pytest.raises(ValueError):
        run(blobs, hyper, ctx)


def test_start_dimension_checked(blobs):
    with pytest.raises(ValueError, match="shape"):
        local_train(SPEC, np.zeros(3), None, client(blobs), LocalHyper(0.1, 1, 4), None, derive_stream(0, ()))


@pytest.mark.parametrize(
    "kw",
    [dict(eta=-1.0), dict(epochs=0), dict(batch_size=0), dict(algorithm="moon"), dict(prox_mu=-1.0),
     dict(acg_lambda=1.0)],
)
def test_hyper_validation(kw):
    args = dict(eta=0.1, epochs=1, batch_size=1)
    args.update(kw)
    with pytest.raises(ValueError):
        LocalHyper(**args)


# ------------------------------------------------------------ learning rate


def test_constant_schedule():
    assert LRSchedule(0.05).at(17, 30) == 0.05


def test_polynomial_decay():
    lr = LRSchedule(0.1, power=2.0, end=0.01)
    assert lr.at(0, 10) == pytest.approx(0.1)
    assert lr.at(5, 10) == pytest.approx(0.09 * 0.25 + 0.01)
    assert lr.at(10, 10) == pytest.approx(0.01)


def test_schedule_from_json(tmp_path):
    p = tmp_path / "lr_poly.json"
    p.write_text('{"eta0": 0.2, "power": 1.0}')
    assert LRSchedule.from_json(p, 0.05) == LRSchedule(0.2, 1.0, 0.0)
    p.write_text('{"eta": 0.2}')
    with pytest.raises(ValueError, match="unknown"):
        LRSchedule.from_json(p, 0.05)
