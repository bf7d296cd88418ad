import json

import numpy as np
import pytest
import torch

from decifr import fedsim, segnet
from decifr.errors import InvalidConfigError, NotFoundError, ProtocolError
from decifr.synthcell import ClientSpec, DatasetConfig, SynthesisParams, build_dataset


def _client(k, n, size=16, seed=0, dtype=torch.float64):
    cfg = DatasetConfig(clients=[ClientSpec(n, ["diffusion/coarse"])], synthesis=SynthesisParams(image_size=max(size, 32)),
                        holdout_per_class=0, seed=seed + k)
    samples = build_dataset(cfg).clients[0]
    st = fedsim.ClientState.from_samples(k, samples, dtype)
    if size < 32:  # downsample to the tiny model's input size
        f = 32 // size
        st.images = st.images[:, :, ::f, ::f].contiguous()
        st.masks = st.masks[:, :, ::f, ::f].contiguous()
    return st


@pytest.fixture(scope="module")
def tiny():
    return segnet.init_model(segnet.preset("tiny"), 1)


def test_flconfig_validation():
    with pytest.raises(InvalidConfigError):
        fedsim.FLConfig(rounds=0)
    with pytest.raises(InvalidConfigError):
        fedsim.FLConfig(learning_rate=-0.1)


def test_zero_learning_rate_leaves_weights(tiny):
    out, _ = fedsim.local_train(tiny, _client(0, 4), fedsim.FLConfig(learning_rate=0.0))
    assert torch.equal(out.flatten(), tiny.flatten())


def test_single_step_is_sgd_definition(tiny):
    c = _client(0, 3)
    cfg = fedsim.FLConfig(local_epochs=1, batch_size=10, learning_rate=0.01)
    out, losses = fedsim.local_train(tiny, c, cfg)
    expected = tiny.flatten() - 0.01 * segnet.param_grad(tiny, c.images, c.masks)
    assert len(losses) == 1
    assert torch.allclose(out.flatten(), expected, rtol=0, atol=1e-15)


def test_step_count_two_epochs_twenty_samples(tiny):
    _, losses = fedsim.local_train(tiny, _client(0, 20), fedsim.FLConfig(local_epochs=2, batch_size=10))
    assert len(losses) == 4


def test_local_train_deterministic(tiny):
    c = _client(0, 7)
    cfg = fedsim.FLConfig(batch_size=3, seed=4)
    a, la = fedsim.local_train(tiny, c, cfg, round_index=2)
    b, lb = fedsim.local_train(tiny, c, cfg, round_index=2)
    assert torch.equal(a.flatten(), b.flatten()) and la == lb


def test_aggregate_examples(tiny):
    other = tiny.with_flat(tiny.flatten() + 1)
    assert torch.equal(fedsim.aggregate([tiny, tiny], [0.5, 0.5]).flatten(), tiny.flatten())
    assert torch.equal(fedsim.aggregate([tiny, other], [1.0, 0.0]).flatten(), tiny.flatten())
    v = fedsim.weighted_mean([torch.tensor([1.0, 3.0]), torch.tensor([3.0, 5.0])], [0.5, 0.5])
    assert torch.equal(v, torch.tensor([2.0, 4.0]))


@pytest.mark.parametrize("vectors,weights", [
    ([torch.zeros(2), torch.zeros(3)], [0.5, 0.5]),
    ([torch.zeros(2), torch.zeros(2)], [0.5]),
    ([torch.zeros(2), torch.zeros(2)], [0.7, 0.7]),
    ([], []),
])
def test_weighted_mean_protocol_errors(vectors, weights):
    with pytest.raises(ProtocolError):
        fedsim.weighted_mean(vectors, weights)


def test_one_client_one_round_equals_local_train(tiny, tmp_path):
    c = _client(0, 5)
    cfg = fedsim.FLConfig(num_clients=1, rounds=1, batch_size=2)
    res = fedsim.run_training(cfg, [c], tiny, tmp_path)
    local, _ = fedsim.local_train(tiny, c, cfg, round_index=1)
    assert torch.equal(res.final.flatten(), local.flatten())


def test_two_rounds_bit_identical(tiny, tmp_path):
    clients = [_client(0, 4), _client(1, 4)]
    cfg = fedsim.FLConfig(rounds=2, batch_size=2, checkpoint_interval=1)
    a = fedsim.run_training(cfg, clients, tiny, tmp_path / "a")
    b = fedsim.run_training(cfg, clients, tiny, tmp_path / "b")
    assert [lg.to_json() for lg in a.logs] == [lg.to_json() for lg in b.logs]
    for rel in ("round2/global.ckpt", "round2/client1_curr.ckpt", "round1/client0_prev.ckpt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_num_clients_mismatch(tiny, tmp_path):
    with pytest.raises(InvalidConfigError):
        fedsim.run_training(fedsim.FLConfig(num_clients=2, rounds=1), [_client(0, 2)], tiny, tmp_path)


def test_intercept_zero_lr_and_immutability(tiny, tmp_path):
    clients = [_client(0, 3), _client(1, 3)]
    cfg = fedsim.FLConfig(rounds=1, learning_rate=0.0)
    fedsim.run_training(cfg, clients, tiny, tmp_path)
    log_ = fedsim.load_round_log(tmp_path, 1)
    prev, curr = fedsim.intercept(log_, 1)
    assert torch.equal(prev.flatten(), curr.flatten())
    before = {p: p.read_bytes() for p in tmp_path.rglob("*.ckpt")}
    a = fedsim.intercept(log_, 0)
    b = fedsim.intercept(log_, 0)
    assert torch.equal(a[1].flatten(), b[1].flatten())
    assert {p: p.read_bytes() for p in tmp_path.rglob("*.ckpt")} == before


def test_intercept_missing_round(tiny, tmp_path):
    fedsim.run_training(fedsim.FLConfig(num_clients=1, rounds=3, checkpoint_interval=5), [_client(0, 2)], tiny,
                        tmp_path)
    with pytest.raises(NotFoundError):
        fedsim.load_round_log(tmp_path, 2)
    log_ = fedsim.load_round_log(tmp_path, 3)  # final round is always persisted
    with pytest.raises(NotFoundError):
        fedsim.intercept(log_, 7)


def test_single_step_round_reproduces_param_grad(tiny, tmp_path):
    c = _client(0, 4)
    eta = 0.01
    cfg = fedsim.FLConfig(num_clients=1, rounds=1, local_epochs=1, batch_size=4, learning_rate=eta)
    fedsim.run_training(cfg, [c], tiny, tmp_path)
    prev, curr = fedsim.intercept(fedsim.load_round_log(tmp_path, 1), 0)
    extracted = (prev.flatten() - curr.flatten()) / eta
    truth = segnet.param_grad(tiny, c.images, c.masks)
    assert float(torch.linalg.vector_norm(extracted - truth) / torch.linalg.vector_norm(truth)) < 1e-5


def test_probes_single_sample_updates(tiny, tmp_path):
    c = _client(0, 4)
    cfg = fedsim.FLConfig(num_clients=1, rounds=1, learning_rate=0.05)
    fedsim.run_training(cfg, [c], tiny, tmp_path)
    log_ = fedsim.load_round_log(tmp_path, 1)
    fedsim.submit_probes(log_, c, cfg, [1, 3])
    reread = fedsim.load_round_log(tmp_path, 1)
    assert sorted(reread.probes) == sorted([c.cell_ids[1], c.cell_ids[3]])
    prev, curr = fedsim.intercept_probe(reread, c.cell_ids[3])
    truth = segnet.param_grad(tiny, c.images[3:4], c.masks[3:4])
    assert torch.allclose((prev.flatten() - curr.flatten()) / 0.05, truth, rtol=1e-9, atol=1e-12)
    with pytest.raises(NotFoundError):
        fedsim.intercept_probe(reread, "absent")


def test_roundlog_json_roundtrip(tiny, tmp_path):
    res = fedsim.run_training(fedsim.FLConfig(num_clients=1, rounds=1), [_client(0, 2)], tiny, tmp_path)
    raw = json.loads((tmp_path / "round1" / "roundlog.json").read_text())
    back = fedsim.RoundLog.from_json(raw, tmp_path)
    assert back.to_json() == res.logs[0].to_json()


def test_desk_loss_decreases_over_first_twenty_rounds(tmp_path):
    mc = segnet.preset("desk")
    clients = [_client(k, 20, size=64, seed=3, dtype=torch.float32) for k in range(2)]
    cfg = fedsim.FLConfig(rounds=20, learning_rate=0.1, checkpoint_interval=100, seed=1)
    res = fedsim.run_training(cfg, clients, segnet.init_model(mc, 0), tmp_path, keep_rounds=())
    losses = np.array([lg.mean_loss for lg in res.logs])
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-9), smooth
