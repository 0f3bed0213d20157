import math

import numpy as np
import pytest

from pedrisk.errors import (
    AllMasked,
    Corrupt,
    FingerprintMismatch,
    InvalidConfig,
    ShapeMismatch,
    UnknownId,
    VersionMismatch,
)
from pedrisk.model import (
    AdamState,
    ModelConfig,
    backward_and_step,
    forward,
    init,
    load,
    loss_and_grads,
    loss_single,
    rank_risk_factors,
    save,
)
from pedrisk.model.net import make_batch
from pedrisk.sequencer import DemographicVector, TimeBinnedSequence

SEQ = TimeBinnedSequence("p", 2, ((0, 3), (1,), ()))
DEMO = DemographicVector(1, 2, 0, 1, 3, 2)


def small_batch():
    seqs = [TimeBinnedSequence("a", 2, ((0, 3), (1,), ())),
            TimeBinnedSequence("b", 2, ((2, 9), (4,)))]
    demos = [DemographicVector(1, 2, 0, 1, 3, 2), DemographicVector(2, 0, 1, 0, 0, 4)]
    return make_batch(seqs, demos,
                      label_obese=[[1, 0, 1], [0, 1, 0]],
                      label_bmi=[[17.0, 18.0, 19.0], [15.0, 16.0, 17.0]],
                      mask=[[1, 1, 0], [1, 0, 1]])


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(vocab_size=10, embed_dim=0)
    with pytest.raises(InvalidConfig):
        ModelConfig(vocab_size=10, horizons=2)
    with pytest.raises(InvalidConfig):
        ModelConfig(vocab_size=10, leaky_relu_slope=1.5)


def test_init_deterministic(tiny_config):
    w1 = init(tiny_config)
    w2 = init(tiny_config)
    assert set(w1.arrays) == set(w2.arrays)
    for name in w1.arrays:
        assert np.array_equal(w1.arrays[name], w2.arrays[name])
    # forget-gate bias initialized to one
    hidden = tiny_config.lstm_hidden
    assert np.all(w1.arrays["lstm0_b"][hidden:2 * hidden] == 1.0)
    assert np.all(w1.arrays["lstm0_b"][:hidden] == 0.0)


def test_forward_outputs_finite_and_normalized(tiny_config):
    w = init(tiny_config)
    out = forward(w, SEQ, DEMO)
    assert np.all(np.isfinite(out.probs))
    assert np.allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out.attention >= 0)
    assert out.attention.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.isfinite(out.bmi_pred))


def test_forward_eval_mode_repeatable(tiny_config):
    w = init(tiny_config)
    a = forward(w, SEQ, DEMO)
    b = forward(w, SEQ, DEMO)
    assert np.array_equal(a.probs, b.probs)
    assert np.array_equal(a.bmi_pred, b.bmi_pred)


def test_forward_permutation_invariance(tiny_config):
    w = init(tiny_config)
    seq_a = TimeBinnedSequence("p", 2, ((0, 3, 7), (1,), ()))
    seq_b = TimeBinnedSequence("p", 2, ((7, 0, 3), (1,), ()))
    a = forward(w, seq_a, DEMO)
    b = forward(w, seq_b, DEMO)
    assert np.allclose(a.probs, b.probs, atol=1e-12)


def test_forward_rejects_unknown_id(tiny_config):
    w = init(tiny_config)
    with pytest.raises(UnknownId):
        forward(w, TimeBinnedSequence("p", 2, ((0, 99),)), DEMO)
    with pytest.raises(ShapeMismatch):
        forward(w, SEQ, DemographicVector(99, 0, 0, 0, 0, 0))


def straight_line_forward_zero_input(config, w):
    """Independent scalar reimplementation of the forward math on all-empty bins.

    Plain Python loops over a T-step recurrence with zero input vectors,
    additive attention, demographic concatenation, and the three heads.
    """
    H = config.lstm_hidden
    n_bins = 3

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    x = [0.0] * config.embed_dim
    layer_input = [x] * n_bins
    for layer in range(config.lstm_layers):
        W = w.arrays[f"lstm{layer}_w"]
        R = w.arrays[f"lstm{layer}_r"]
        b = w.arrays[f"lstm{layer}_b"]
        h_prev, c_prev = [0.0] * H, [0.0] * H
        hs = []
        for t in range(n_bins):
            a = [0.0] * (4 * H)
            for j in range(4 * H):
                s = b[j]
                for k, xv in enumerate(layer_input[t]):
                    s += xv * W[k, j]
                for k in range(H):
                    s += h_prev[k] * R[k, j]
                a[j] = s
            i = [sigmoid(a[j]) for j in range(H)]
            f = [sigmoid(a[H + j]) for j in range(H)]
            g = [math.tanh(a[2 * H + j]) for j in range(H)]
            o = [sigmoid(a[3 * H + j]) for j in range(H)]
            c = [f[j] * c_prev[j] + i[j] * g[j] for j in range(H)]
            h = [o[j] * math.tanh(c[j]) for j in range(H)]
            hs.append(h)
            h_prev, c_prev = h, c
        layer_input = hs

    Wa, ba, v = w.arrays["attn_w"], w.arrays["attn_b"], w.arrays["attn_v"]
    scores = []
    for h in layer_input:
        u = [math.tanh(sum(h[k] * Wa[k, j] for k in range(H)) + ba[j])
             for j in range(config.attn_dim)]
        scores.append(sum(u[j] * v[j] for j in range(config.attn_dim)))
    mx = max(scores)
    exp_s = [math.exp(s - mx) for s in scores]
    total = sum(exp_s)
    alpha = [e / total for e in exp_s]
    ctx = [sum(alpha[t] * layer_input[t][j] for t in range(n_bins)) for j in range(H)]

    demo_idx = DEMO.as_tuple()
    demo_vec = []
    for i_field, idx in enumerate(demo_idx):
        demo_vec.extend(w.arrays[f"demo{i_field}_embed"][idx].tolist())
    z = ctx + demo_vec

    probs, bmis = [], []
    for k in range(3):
        W1, b1 = w.arrays[f"head{k}_w1"], w.arrays[f"head{k}_b1"]
        W2, b2 = w.arrays[f"head{k}_w2"], w.arrays[f"head{k}_b2"]
        a1 = [sum(z[i] * W1[i, j] for i in range(len(z))) + b1[j]
              for j in range(W1.shape[1])]
        r1 = [vj if vj > 0 else config.leaky_relu_slope * vj for vj in a1]
        a2 = [sum(r1[i] * W2[i, j] for i in range(len(r1))) + b2[j]
              for j in range(W2.shape[1])]
        r2 = [vj if vj > 0 else config.leaky_relu_slope * vj for vj in a2]
        Wc, bc = w.arrays[f"head{k}_wc"], w.arrays[f"head{k}_bc"]
        logits = [sum(r2[i] * Wc[i, j] for i in range(len(r2))) + bc[j] for j in range(2)]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        probs.append([e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])])
        Wr, br = w.arrays[f"head{k}_wr"], w.arrays[f"head{k}_br"]
        bmis.append(sum(r2[i] * Wr[i, 0] for i in range(len(r2))) + br[0])
    return np.array(probs), np.array(bmis), np.array(alpha)


def test_forward_matches_independent_oracle_on_empty_bins(tiny_config):
    w = init(tiny_config, dtype=np.float64)
    seq = TimeBinnedSequence("p", 2, ((), (), ()))
    out = forward(w, seq, DEMO)
    probs, bmis, alpha = straight_line_forward_zero_input(tiny_config, w)
    assert np.allclose(out.probs, probs, atol=1e-10)
    assert np.allclose(out.bmi_pred, bmis, atol=1e-10)
    assert np.allclose(out.attention, alpha, atol=1e-10)


def test_loss_single_values(tiny_config):
    w = init(tiny_config)
    out = forward(w, SEQ, DEMO)
    # fabricate a perfect prediction
    out.probs[:, 0] = 0.0
    out.probs[:, 1] = 1.0
    out.bmi_pred[:] = 16.0
    assert loss_single(out, [1, 1, 1], [16.0, 16.0, 16.0], [1, 1, 1], 1.0) < 1e-9
    # uniform probability, lambda 0 -> ln 2
    out.probs[:, :] = 0.5
    assert loss_single(out, [1, 0, 0], [0, 0, 0], [1, 0, 0], 0.0) == pytest.approx(
        math.log(2.0), abs=1e-9)
    with pytest.raises(AllMasked):
        loss_single(out, [1, 1, 1], [0, 0, 0], [0, 0, 0], 1.0)


def test_loss_and_grads_all_masked(tiny_config):
    w = init(tiny_config, dtype=np.float64)
    batch = small_batch()
    batch.mask[:] = 0.0
    with pytest.raises(AllMasked):
        loss_and_grads(w, batch)


def test_train_mode_dropout_varies_but_eval_does_not(tiny_config):
    cfg = ModelConfig(**{**tiny_config.to_dict(), "dropout": 0.5})
    w = init(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    batch = small_batch()
    l1, _, _ = loss_and_grads(w, batch, train_mode=True, rng=rng)
    l2, _, _ = loss_and_grads(w, batch, train_mode=True, rng=rng)
    assert l1 != l2
    e1, _, _ = loss_and_grads(w, batch, train_mode=False)
    e2, _, _ = loss_and_grads(w, batch, train_mode=False)
    assert e1 == e2


def test_step_with_zero_lr_keeps_weights_bitwise(tiny_config):
    w = init(tiny_config)
    before = {k: v.copy() for k, v in w.arrays.items()}
    opt = AdamState.for_weights(w, seed=0)
    backward_and_step(w, small_batch(), opt, lr=0.0)
    for name in before:
        assert np.array_equal(before[name], w.arrays[name]), name


def test_single_step_descends(tiny_config):
    w = init(tiny_config, dtype=np.float64)
    batch = small_batch()
    before, _, _ = loss_and_grads(w, batch, train_mode=False)
    opt = AdamState.for_weights(w, seed=0)
    backward_and_step(w, batch, opt, lr=1e-3)
    after, _, _ = loss_and_grads(w, batch, train_mode=False)
    assert after < before


def test_overfit_small_set(tiny_config):
    # capacity check: a tiny model memorizes 32 examples quickly
    rng = np.random.default_rng(7)
    seqs, demos, lo, lb, mask = [], [], [], [], []
    for i in range(32):
        bins = tuple(tuple(sorted(set(rng.integers(0, 10, size=rng.integers(0, 4)).tolist())))
                     for _ in range(3))
        seqs.append(TimeBinnedSequence(f"p{i}", 2, bins))
        demos.append(DemographicVector(int(rng.integers(0, 3)), int(rng.integers(0, 3)),
                                       int(rng.integers(0, 3)), int(rng.integers(0, 3)),
                                       int(rng.integers(0, 4)), int(rng.integers(0, 5))))
        label = bool(rng.random() < 0.5)
        lo.append([label, label, label])
        lb.append([0.3 + 0.1 * label] * 3)
        mask.append([1, 1, 1])
    batch = make_batch(seqs, demos, lo, lb, mask)
    cfg = ModelConfig(vocab_size=10, embed_dim=8, lstm_hidden=16, lstm_layers=2,
                      attn_dim=8, demo_embed_dim=2, demo_cardinalities=(3, 3, 3, 3, 4, 5),
                      head_hidden=(16, 8), dropout=0.0, loss_lambda=1.0, seed=1)
    w = init(cfg, dtype=np.float64)
    opt = AdamState.for_weights(w, seed=2)
    final = None
    for step in range(500):
        _, metrics = backward_and_step(w, batch, opt, lr=1e-2)
        final = metrics["loss"]
        if final < 0.01:
            break
    assert final < 0.01, f"loss stuck at {final}"


def test_rank_risk_factors(tiny_config, registry):
    import numpy as np

    from pedrisk.registry import fit_cohort_quantiles

    fitted = fit_cohort_quantiles(registry, {
        e.feature_id: np.linspace(1, 100, 200) for e in registry.entries
        if e.quantization is not None and e.quantization.mode == "cohort_quantiles"
    })
    cfg = ModelConfig(**{**tiny_config.to_dict(), "vocab_size": fitted.input_vocab_size})
    w = init(cfg)
    empty = forward(w, TimeBinnedSequence("p", 2, ((), ())), DEMO)
    assert rank_risk_factors(empty, TimeBinnedSequence("p", 2, ((), ())), fitted, 5) == []

    one = TimeBinnedSequence("p", 2, ((fitted.input_id(0, 0),), ()))
    out = forward(w, one, DEMO)
    ranked = rank_risk_factors(out, one, fitted, 5)
    assert len(ranked) == 1
    assert ranked[0][0] == "Asthma"
    assert ranked[0][1] == "condition"
    assert ranked[0][2] == pytest.approx(1.0)

    # feature active in high-attention bins outranks one in low-attention bins
    seq = TimeBinnedSequence("p", 2, ((fitted.input_id(0, 0), fitted.input_id(1, 0)),
                                      (fitted.input_id(1, 0),)))
    out = forward(w, seq, DEMO)
    by_hand = {}
    embed = w.arrays["embed"]
    for t, ids in enumerate(seq.bins):
        for input_id in ids:
            by_hand[input_id] = by_hand.get(input_id, 0.0) + float(
                out.attention[t]) * float(np.linalg.norm(embed[input_id]))
    expected_order = sorted(by_hand, key=lambda i: -by_hand[i])
    ranked = rank_risk_factors(out, seq, fitted, 5)
    got_order = [fitted.index[("SNOMED", "195967001")]
                 if r[0] == "Asthma" else fitted.index[("SNOMED", "65363002")]
                 for r in ranked]
    assert got_order == expected_order
    assert sum(r[2] for r in ranked) == pytest.approx(1.0)


def test_save_load_round_trip(tiny_config, tmp_path):
    w = init(tiny_config)
    w.meta["registry_fingerprint"] = "abc123"
    w.meta["model_version"] = "test"
    path = tmp_path / "model.prsk"
    save(w, path)
    again = load(path)
    assert again.config == tiny_config
    assert again.meta["registry_fingerprint"] == "abc123"
    for name in w.arrays:
        assert np.array_equal(w.arrays[name], again.arrays[name]), name


def test_load_fingerprint_mismatch(tiny_config, tmp_path):
    w = init(tiny_config)
    w.meta["registry_fingerprint"] = "abc123"
    path = tmp_path / "model.prsk"
    save(w, path)
    with pytest.raises(FingerprintMismatch):
        load(path, expected_fingerprint="something-else")


def test_load_truncated_is_corrupt(tiny_config, tmp_path):
    w = init(tiny_config)
    path = tmp_path / "model.prsk"
    save(w, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 64])
    with pytest.raises(Corrupt):
        load(path)
    path.write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(Corrupt):
        load(path)


def test_load_version_mismatch(tiny_config, tmp_path):
    import struct

    w = init(tiny_config)
    path = tmp_path / "model.prsk"
    save(w, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = struct.pack("<H", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load(path)


def test_backend_parity(tiny_config):
    from pedrisk.model import kernels

    w = init(tiny_config, dtype=np.float64)
    batch = small_batch()
    original = kernels.active_backend()
    try:
        kernels.set_backend("numpy")
        l_np, g_np, _ = loss_and_grads(w, batch)
        kernels.set_backend("numba")
        l_nb, g_nb, _ = loss_and_grads(w, batch)
    finally:
        kernels.set_backend(original)
    assert l_np == pytest.approx(l_nb, abs=1e-10)
    for name in g_np:
        assert np.allclose(g_np[name], g_nb[name], atol=1e-9), name
