import math

import numpy as np
import pytest
import torch
from fd import check_grads
from hypothesis import given, settings
from hypothesis import strategies as st

from analogykg.mart.losses import (
    LossBreakdown,
    mem_loss,
    mem_loss_t,
    relaxation_loss,
    relaxation_loss_t,
    total_loss,
)
from analogykg.mart.model import MartConfig, MartLayer, collate, gate_matrix, gated_attention, image_table
from analogykg.mart.prompts import EXAMPLE, QUESTION, PromptError, Vocabulary, build_analogy_prompt
from analogykg.mart.train import MartTrainConfig, batch_losses, init_relation_token, new_model

torch.set_default_dtype(torch.float32)

# --- independent numpy oracle of one post-LN layer


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def _np(t):
    return t.detach().numpy().astype(np.float64)


def oracle_attention(x, layer, segments, g_ea=1.0, g_ae=1.0, mode="pre"):
    """Eqs. 2-4 written out per head with explicit loops over the gate blocks."""
    S, d = x.shape
    H = layer.heads
    dh = d // H
    q = x @ _np(layer.wq.weight).T + _np(layer.wq.bias)
    k = x @ _np(layer.wk.weight).T + _np(layer.wk.bias)
    v = x @ _np(layer.wv.weight).T + _np(layer.wv.bias)
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        P = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        G = np.ones((S, S))
        for i in range(S):
            for j in range(S):
                if segments[i] == EXAMPLE and segments[j] == QUESTION:
                    G[i, j] = g_ea[h] if np.ndim(g_ea) else g_ea
                elif segments[i] == QUESTION and segments[j] == EXAMPLE:
                    G[i, j] = g_ae[h] if np.ndim(g_ae) else g_ae
        if mode == "pre":
            P = P * G
        A = np.exp(P - P.max(1, keepdims=True))
        A /= A.sum(1, keepdims=True)
        if mode == "post":
            A = A * G
        heads.append(A @ v[:, sl])
    ctx = np.concatenate(heads, axis=1)
    out = ctx @ _np(layer.wo.weight).T + _np(layer.wo.bias)
    return _ln(x + out, _np(layer.ln1.weight), _np(layer.ln1.bias))


def oracle_layer(x, layer, segments, **kw):
    h = oracle_attention(x, layer, segments, **kw)
    f = _gelu(h @ _np(layer.ff1.weight).T + _np(layer.ff1.bias)) @ _np(layer.ff2.weight).T + _np(layer.ff2.bias)
    return _ln(h + f, _np(layer.ln2.weight), _np(layer.ln2.bias))


def random_layer(d=8, heads=2, seed=0):
    torch.manual_seed(seed)
    layer = MartLayer(d, heads).double().eval()
    with torch.no_grad():
        for p in layer.parameters():
            p.normal_(0, 0.5)
    return layer


def random_segments(rng, S):
    cut = int(rng.integers(0, S + 1))
    return [EXAMPLE] * cut + [QUESTION] * (S - cut)


def test_gate_identity_against_ungated_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(20):
        layer = random_layer(seed=i)
        S = int(rng.integers(2, 12))
        x = rng.normal(size=(S, 8))
        seg = random_segments(rng, S)
        xt, st_ = torch.tensor(x), torch.tensor(seg)
        ones = torch.ones(2, dtype=torch.float64)
        gated = layer(xt, st_, ones, ones).detach().numpy()
        # ungated oracle: no gate matrix at all
        worst = max(worst, np.abs(gated - oracle_layer(x, layer, [0] * S)).max())
        # ... and the model's own ungated path agrees
        assert torch.equal(layer(xt, st_, ones, ones), layer(xt, st_, None, None))
    assert worst <= 1e-12


@pytest.mark.parametrize("mode", ["pre", "post"])
def test_two_plus_two_tokens_match_matrix_oracle(mode):
    d = 8
    layer = random_layer(d, heads=1, seed=11)
    rng = np.random.default_rng(5)
    with torch.no_grad():  # hand-built projections
        layer.wq.weight.copy_(torch.tensor(rng.normal(size=(d, d))))
        layer.wk.weight.copy_(torch.eye(d))
        layer.wv.weight.copy_(torch.tensor(np.triu(np.ones((d, d)))))
    x = rng.normal(size=(4, d))
    seg = [EXAMPLE, EXAMPLE, QUESTION, QUESTION]
    g_ea, g_ae = 0.3, 0.8
    got = gated_attention(torch.tensor(x), layer, torch.tensor(seg), torch.tensor([g_ea], dtype=torch.float64), torch.tensor([g_ae], dtype=torch.float64),
                          gate_mode="pre_softmax" if mode == "pre" else "post_softmax")
    want = oracle_attention(x, layer, seg, g_ea=g_ea, g_ae=g_ae, mode=mode)
    assert np.abs(got.detach().numpy() - want).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(S=st.integers(1, 10), seed=st.integers(0, 1000), g=st.floats(0.01, 0.99))
def test_single_segment_gates_inert(S, seed, g):
    layer = random_layer(seed=seed % 7)
    x = torch.tensor(np.random.default_rng(seed).normal(size=(S, 8)))
    for lab in (EXAMPLE, QUESTION):
        seg = torch.full((S,), lab)
        gv = torch.full((2,), g, dtype=torch.float64)
        assert torch.equal(gated_attention(x, layer, seg, gv, gv), gated_attention(x, layer, seg, None, None))


def test_gate_matrix_blocks():
    seg = torch.tensor([[0, 0, 1, -1]])
    G = gate_matrix(seg, torch.tensor([0.2]), torch.tensor([0.7]))[0, 0]
    expected = torch.tensor([[1, 1, 0.2, 1], [1, 1, 0.2, 1], [0.7, 0.7, 1, 1], [1, 1, 1, 1]])
    assert torch.allclose(G, expected)


def test_non_contiguous_segments_rejected():
    layer = random_layer()
    with pytest.raises(PromptError):
        gated_attention(torch.zeros(3, 8, dtype=torch.float64), layer, torch.tensor([0, 1, 0]), None, None)


# --- full model


@pytest.fixture(scope="module")
def tiny(small_world):
    kg = small_world.kg
    vocab = Vocabulary(kg)
    cfg = MartConfig(dim=8, layers=1, heads=1, image_dim=image_table(kg).shape[1], init_std=0.5, dropout=0.0)
    model = new_model(kg, vocab, cfg, seed=1, dtype=torch.float64).eval()
    with torch.no_grad():
        model.gate_raw_ea.fill_(0.3)
        model.gate_raw_ae.fill_(-0.4)
        model.missing_image.normal_(0, 0.5)
        for name, p in model.named_parameters():
            if name.endswith("bias") or "ln" in name:
                p.add_(torch.randn_like(p) * 0.1)
    init_relation_token(model, vocab)
    return kg, vocab, model, small_world.dataset


def test_full_forward_backward_matches_finite_differences(tiny):
    kg, vocab, model, ds = tiny
    prompts = [build_analogy_prompt(x, kg, vocab) for x in ds.train[:3]]
    batch = collate(prompts)
    fn = lambda: batch_losses(model, vocab, batch, 0.43)["total"]  # noqa: E731
    out = model(batch)
    cos = torch.nn.functional.cosine_similarity(out["h_head"], out["h_query"])
    assert (cos.abs() > 1e-3).all()  # away from the relu kink
    errs = check_grads(fn, dict(model.named_parameters()))
    assert set(errs) == {n for n, _ in model.named_parameters()}


@pytest.mark.parametrize("part", ["l_rel", "l_mem"])
def test_each_loss_gradient(tiny, part):
    kg, vocab, model, ds = tiny
    batch = collate([build_analogy_prompt(x, kg, vocab) for x in ds.train[3:5]])
    params = {n: p for n, p in model.named_parameters() if n.startswith(("gate_raw", "layers.0.wq", "mlm", "tok_emb"))}
    check_grads(lambda: batch_losses(model, vocab, batch, 0.43)[part], params)


def test_zero_model_gives_uniform_logits(small_world):
    kg = small_world.kg
    vocab = Vocabulary(kg)
    model = new_model(kg, vocab).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    batch = collate([build_analogy_prompt(x, kg, vocab) for x in small_world.dataset.test[:4]])
    logits = model(batch)["logits"]
    assert torch.all(logits == logits[0, 0])


def test_candidate_slice_permutation(tiny):
    kg, vocab, model, ds = tiny
    batch = collate([build_analogy_prompt(ds.test[0], kg, vocab)])
    with torch.no_grad():
        out = model(batch)
        mask_t = model.mlm_transform(out["hidden"][0, batch.mask_pos[0]])
        full = model.logits(mask_t)
        sl = vocab.analogy_slice
        perm = torch.randperm(sl.stop - sl.start, generator=torch.Generator().manual_seed(0))
        W = model.tok_emb.weight[sl][perm]
        permuted = mask_t @ W.T + model.mlm_bias[sl][perm]
    assert torch.allclose(permuted, full[sl][perm], atol=0, rtol=0)
    probs = torch.softmax(out["logits"][0], -1)
    assert abs(probs.sum().item() - 1) <= 1e-9


def test_gates_stay_in_open_interval(tiny):
    _, _, model, _ = tiny
    with torch.no_grad():
        raw = model.gate_raw_ea.clone()
        for v in (-30.0, -5.0, 0.0, 5.0, 30.0):
            model.gate_raw_ea.fill_(v)
            g, _ = model.gates()
            assert torch.all((g > 0) & (g <= 1))
            if abs(v) <= 5:
                assert torch.all(g < 1)
        model.gate_raw_ea.copy_(raw)


def test_disabled_gates_equal_ungated_transformer(tiny):
    kg, vocab, model, ds = tiny
    batch = collate([build_analogy_prompt(x, kg, vocab) for x in ds.test[:5]])
    model.set_gates_enabled(False)
    try:
        a = model(batch)["hidden"]
        x = model.embed(batch)
        for layer in model.layers:
            x = layer(x, batch.segments, None, None, batch.pad_mask)
        assert torch.equal(a, x)
        g_ea, g_ae = torch.ones_like(model.gate_raw_ea), torch.ones_like(model.gate_raw_ae)
        y = model.embed(batch)
        for i, layer in enumerate(model.layers):
            y = layer(y, batch.segments, g_ea[i], g_ae[i], batch.pad_mask)
        assert (a - y).abs().max() <= 1e-12
    finally:
        model.set_gates_enabled(True)


def test_padding_does_not_leak(tiny):
    kg, vocab, model, ds = tiny
    short, long_ = ds.test[0], max(ds.test, key=lambda x: len(build_analogy_prompt(x, kg, vocab)))
    alone = model(collate([build_analogy_prompt(short, kg, vocab)]))["logits"]
    padded = model(collate([build_analogy_prompt(short, kg, vocab), build_analogy_prompt(long_, kg, vocab)]))["logits"]
    assert torch.allclose(alone[0], padded[0], atol=1e-12)


# --- losses


def test_relaxation_examples():
    e = np.array([1.0, 0.0])
    assert relaxation_loss(e, e, [1, 0], [-0.5, math.sqrt(0.75)]) == pytest.approx(0.0, abs=1e-15)
    assert relaxation_loss([1, 0], [0, 1], [1, 2], [1, 2]) == pytest.approx(2.0)
    a, b = [1.0, 0.0], [0.5, math.sqrt(0.75)]  # cos 0.5
    c, d = [1.0, 0.0], [0.2, math.sqrt(0.96)]  # cos 0.2
    assert relaxation_loss(a, b, c, d) == pytest.approx(0.7)
    # opposed relations with identical entities attain the formula's maximum
    assert relaxation_loss([1, 0], [-1, 0], [1, 1], [1, 1]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        relaxation_loss([0, 0], [1, 0], [1, 0], [1, 0])


vec = st.lists(st.floats(-100, 100), min_size=4, max_size=4)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec)
def test_relaxation_bounds(a, b, c, d):
    if min(np.linalg.norm(v) for v in (a, b, c, d)) < 1e-6:
        return
    v = relaxation_loss(a, b, c, d)
    assert 0.0 <= v <= 3.0
    cos = lambda x, y: np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y))  # noqa: E731
    assert v == pytest.approx(1 - cos(a, b) + max(0.0, cos(c, d)), abs=1e-9)
    t = relaxation_loss_t(*(torch.tensor([x], dtype=torch.float64) for x in (a, b, c, d))).item()
    assert t == pytest.approx(v, abs=1e-9)


def test_mem_loss_examples():
    assert mem_loss([0.3] * 4, 7, [5, 6, 7, 8]) == pytest.approx(math.log(4))
    assert mem_loss([2.0, 1.0, 0.0], 0, [0, 1, 2]) == pytest.approx(0.4076, abs=1e-4)
    assert mem_loss([2.0, 1.0, 0.0], 0, [0, 1, 2]) == pytest.approx(-math.log(math.e**2 / (math.e**2 + math.e + 1)))
    assert mem_loss([1e4, 0.0, 0.0], 0, [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        mem_loss([0.0, 0.0], 9, [0, 1])
    t = mem_loss_t(torch.tensor([[2.0, 1.0, 0.0]], dtype=torch.float64), torch.tensor([0])).item()
    assert t == pytest.approx(mem_loss([2.0, 1.0, 0.0], 0, [0, 1, 2]), abs=1e-12)


def test_total_loss_examples():
    assert total_loss(5.0, 1.5, 0.0) == 1.5
    assert total_loss(5.0, 1.5, 1.0) == 5.0
    assert total_loss(2.0, 1.0, 0.43) == pytest.approx(1.43)
    with pytest.raises(ValueError):
        total_loss(1, 1, 1.2)
    b = LossBreakdown.of(0.3, 0.9, 0.43)
    assert b.total == b.lam * b.l_rel + (1 - b.lam) * b.l_mem


def test_batch_total_is_exact_affine_combination(tiny):
    kg, vocab, model, ds = tiny
    batch = collate([build_analogy_prompt(x, kg, vocab) for x in ds.train[:6]])
    out = batch_losses(model, vocab, batch, 0.43)
    assert out["total"].item() == (0.43 * out["l_rel"] + (1 - 0.43) * out["l_mem"]).item()
    assert 0 <= out["l_rel"].item() <= 2


def test_effective_lambda():
    assert MartTrainConfig().effective_lambda == 0.43
    assert MartTrainConfig(no_relaxation=True).effective_lambda == 0.0
    assert MartTrainConfig(no_example=True).effective_lambda == 0.0
