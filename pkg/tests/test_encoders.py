import numpy as np
import pytest

from dapc import autodiff as ad
from dapc import encoders as enc
from dapc.encoders import DecoderSpec, EncoderSpec, decode, encode, init_params
from dapc.masking import MaskSpec
from dapc.train import Model, ObjectiveWeights, dapc_step

from conftest import fd_check


def reference_gru(x, W_ih, W_hh, b_ih, b_hh, reverse=False):
    """Textbook GRU, one sequence at a time, logistic sigmoid via exp."""
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    B, L, _ = x.shape
    H = W_hh.shape[0]
    out = np.zeros((B, L, H))
    for b in range(B):
        h = np.zeros(H)
        order = range(L - 1, -1, -1) if reverse else range(L)
        for t in order:
            gx = x[b, t] @ W_ih + b_ih
            gh = h @ W_hh + b_hh
            r = sig(gx[:H] + gh[:H])
            u = sig(gx[H:2 * H] + gh[H:2 * H])
            n = np.tanh(gx[2 * H:] + r * gh[2 * H:])
            h = u * h + (1 - u) * n
            out[b, t] = h
    return out


def gru_params(rng, n_in, H):
    return (rng.normal(size=(n_in, 3 * H)) * 0.5, rng.normal(size=(H, 3 * H)) * 0.5,
            rng.normal(size=3 * H) * 0.1, rng.normal(size=3 * H) * 0.1)


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_matches_reference(reverse, rng):
    x = rng.normal(size=(3, 12, 4))
    p = gru_params(rng, 4, 5)
    got = enc.gru(x, *p, reverse=reverse).values
    np.testing.assert_allclose(got, reference_gru(x, *p, reverse=reverse), atol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_grad_fd(reverse, rng):
    x = rng.normal(size=(2, 7, 3))
    p = gru_params(rng, 3, 4)
    w = rng.normal(size=(2, 7, 4))
    err = fd_check(lambda *a: ad.sum(ad.mul(enc.gru(*a, reverse=reverse), w)), [x, *p])
    assert err < 1e-6


@pytest.mark.skipif(enc.GRU_BACKEND != "numba", reason="numba not installed")
@pytest.mark.parametrize("reverse", [False, True])
def test_gru_backends_agree(reverse, rng):
    x = rng.normal(size=(3, 20, 4))
    W_ih, W_hh, b_ih, b_hh = gru_params(rng, 4, 6)
    _, cache = enc.gru_forward_arrays(x, W_ih, W_hh, b_ih, b_hh, reverse)
    g = rng.normal(size=(3, 20, 6))
    a = enc.gru_backward_arrays(g, x, W_ih, W_hh, cache, reverse, backend="numpy")
    b = enc.gru_backward_arrays(g, x, W_ih, W_hh, cache, reverse, backend="numba")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-13)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        enc._resolve_backend("cuda")


def test_gru_saturated_inputs_stay_finite():
    x = np.full((1, 5, 2), 1e4)
    out = enc.gru(x, np.ones((2, 6)), np.ones((2, 6)), np.zeros(6), np.zeros(6)).values
    assert np.all(np.isfinite(out))


# -- encode -------------------------------------------------------------------

def test_linear_identity_is_passthrough(rng):
    spec = EncoderSpec("linear", 4, 4, init="identity")
    X = rng.normal(size=(2, 10, 4))
    np.testing.assert_array_equal(encode(spec, init_params(spec, 0), X).values, X)


@pytest.mark.parametrize("kind", ["linear", "mlp", "gru_uni", "gru_bi"])
def test_latent_shape(kind, rng):
    spec = EncoderSpec(kind, 5, 3, hidden_size=4, n_layers=2)
    Z = encode(spec, init_params(spec, 1), rng.normal(size=(2, 9, 5))).values
    assert Z.shape == (2, 9, 3)
    assert spec.causal == (kind != "gru_bi")


@pytest.mark.parametrize("kind", ["mlp", "gru_uni"])
def test_causal_encoders_ignore_future(kind, rng):
    spec = EncoderSpec(kind, 3, 2, hidden_size=5, n_layers=2)
    params = init_params(spec, 0)
    X = rng.normal(size=(1, 20, 3))
    Y = X.copy()
    Y[0, 12:] += rng.normal(size=(8, 3))
    a = encode(spec, params, X).values
    b = encode(spec, params, Y).values
    np.testing.assert_array_equal(a[:, :12], b[:, :12])
    assert not np.array_equal(a[:, 12:], b[:, 12:])


def test_gru_uni_zero_sensitivity_to_future(rng):
    spec = EncoderSpec("gru_uni", 2, 2, hidden_size=3)
    params = init_params(spec, 0)
    X = ad.Tensor(rng.normal(size=(1, 10, 2)), requires_grad=True)
    g = ad.backward(ad.sum(ad.index(encode(spec, params, X), (0, 4))))[X]
    assert np.all(g[0, 5:] == 0)
    assert np.any(g[0, :5] != 0)


def test_gru_bi_reversal_equivariance(rng):
    spec = EncoderSpec("gru_bi", 3, 2, hidden_size=4, n_layers=2)
    params = init_params(spec, 3)
    swapped = enc.ParamStore()
    H = spec.hidden_size
    for name, t in params.items():
        v = t.values
        if ".fwd." in name:
            name = name.replace(".fwd.", ".bwd.")
        elif ".bwd." in name:
            name = name.replace(".bwd.", ".fwd.")
        if name.endswith("W_ih") and not name.startswith("enc.gru0"):
            v = np.concatenate([v[H:], v[:H]])
        if name == "enc.proj.W":
            v = np.concatenate([v[H:], v[:H]])
        swapped.add(name, v)
    swapped = enc.ParamStore((k, swapped[k]) for k in params)
    X = rng.normal(size=(2, 11, 3))
    a = encode(spec, params, X).values
    b = encode(spec, swapped, X[:, ::-1]).values
    np.testing.assert_allclose(b, a[:, ::-1], atol=1e-12)


def test_input_dim_mismatch(rng):
    spec = EncoderSpec("mlp", 3, 2)
    with pytest.raises(ad.ContractError):
        encode(spec, init_params(spec, 0), np.zeros((1, 5, 4)))


def test_dropout_train_vs_eval(rng):
    spec = EncoderSpec("gru_bi", 3, 2, hidden_size=6, n_layers=2, dropout=0.5)
    params = init_params(spec, 0)
    X = rng.normal(size=(2, 10, 3))
    e1 = encode(spec, params, X).values
    e2 = encode(spec, params, X).values
    assert e1.tobytes() == e2.tobytes()
    t1 = encode(spec, params, X, True, np.random.default_rng(4)).values
    t2 = encode(spec, params, X, True, np.random.default_rng(4)).values
    assert t1.tobytes() == t2.tobytes()
    assert not np.allclose(t1, e1)
    with pytest.raises(ad.ContractError):
        encode(spec, params, X, True, None)


def test_encode_numpy_matches_traced(rng):
    spec = EncoderSpec("gru_bi", 3, 2, hidden_size=4)
    params = init_params(spec, 0)
    X = rng.normal(size=(70, 8, 3))
    np.testing.assert_array_equal(enc.encode_numpy(spec, params, X), encode(spec, params, X).values)


# -- decode -------------------------------------------------------------------

def test_zero_linear_decoder_gives_zeros(rng):
    spec = DecoderSpec(3, 4, ())
    params = init_params(spec, 0)
    params["dec.fc0.W"].values[:] = 0
    np.testing.assert_array_equal(decode(spec, params, rng.normal(size=(2, 5, 3))).values, 0)


def test_decoder_is_pointwise_in_time(rng):
    spec = DecoderSpec(3, 4, (6,))
    params = init_params(spec, 0)
    Z = rng.normal(size=(1, 9, 3))
    perm = rng.permutation(9)
    a = decode(spec, params, Z).values
    b = decode(spec, params, Z[:, perm]).values
    np.testing.assert_array_equal(b, a[:, perm])


def test_decoder_grad_fd(rng):
    spec = DecoderSpec(2, 3, (4, 4), activation="tanh")
    params = init_params(spec, 0)
    names = list(params)
    w = rng.normal(size=(2, 5, 3))

    def build(z, *ps):
        return ad.sum(ad.mul(decode(spec, dict(zip(names, ps)), z), w))

    assert fd_check(build, [rng.normal(size=(2, 5, 2))] + [params[n].values for n in names]) < 1e-5


def test_decoder_latent_mismatch():
    with pytest.raises(ad.ContractError):
        decode(DecoderSpec(3, 4), init_params(DecoderSpec(3, 4), 0), np.zeros((5, 2)))


# -- init and checkpoints -----------------------------------------------------

def test_init_deterministic_and_seed_sensitive():
    spec = EncoderSpec("gru_bi", 4, 3, hidden_size=5)
    a, b, c = init_params(spec, 7), init_params(spec, 7), init_params(spec, 8)
    assert all(np.array_equal(a[k].values, b[k].values) for k in a)
    assert any(not np.array_equal(a[k].values, c[k].values) for k in a)
    assert all(not np.any(a[k].values) for k in a if k.endswith(("b_ih", "b_hh")))


def test_init_variance_is_inverse_fan_in():
    spec = EncoderSpec("linear", 100, 100)
    W = init_params(spec, 0)["enc.proj.W"].values
    assert W.size >= 10_000
    assert abs(W.var() * 100 - 1.0) < 0.2


def test_save_load_roundtrip(tmp_path):
    spec = EncoderSpec("gru_bi", 4, 3, hidden_size=5)
    params = init_params(spec, 2)
    path = tmp_path / "p.json"
    enc.save_params(params, path, extra={"note": "x"})
    loaded, extra = enc.load_params(path)
    assert list(loaded) == list(params)
    assert extra == {"note": "x"}
    assert loaded.seed == 2
    for k in params:
        assert loaded[k].values.tobytes() == params[k].values.tobytes()


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ad.ContractError):
        enc.load_params(path)


def test_spec_dict_roundtrip():
    spec = EncoderSpec("mlp", 4, 3, hidden_size=5, dropout=0.2)
    assert enc.encoder_spec_from_dict(enc.spec_to_dict(spec)) == spec
    dspec = DecoderSpec(3, 4, (8, 8))
    assert enc.decoder_spec_from_dict(enc.spec_to_dict(dspec)) == dspec


def test_bad_specs():
    with pytest.raises(ad.ContractError):
        EncoderSpec("transformer", 3, 2)
    with pytest.raises(ad.ContractError):
        EncoderSpec("mlp", 3, 2, dropout=1.0)
    with pytest.raises(ad.ContractError):
        EncoderSpec("mlp", 3, 3, init="identity")


# -- full pipeline gradient ---------------------------------------------------

def test_pipeline_grad_two_layer_gru():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2, 24, 6))
    model = Model.create(EncoderSpec("gru_bi", 6, 3, hidden_size=3, n_layers=2),
                         DecoderSpec(3, 6, (4,)), seed=0)
    weights = ObjectiveWeights(T=2, alpha=0.0, beta=0.5, gamma=0.1)
    spec = MaskSpec(2, 4, 1, 2)
    names = list(model.params)

    def build(*tensors):
        model.params.update(dict(zip(names, tensors)))
        return dapc_step(X, model, weights, spec, np.random.default_rng(2)).loss

    assert fd_check(build, [model.params[n].values.copy() for n in names]) < 1e-4
