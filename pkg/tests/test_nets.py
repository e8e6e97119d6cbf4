import numpy as np
import pytest

from featcraft.diffcore import Var, gradients
from featcraft.diffcore import ops
from featcraft.nets import (
    LayerStack,
    ModelBundle,
    gradient_penalty,
    interpolate_grad_norms,
    load_tensors,
    oracle_predict,
    save_tensors,
    train_amortizer,
    train_autoencoder,
    train_identity_oracle,
    train_task_model,
    wgan_pretrain,
)
from featcraft.pii import utility_score

from conftest import linear_stack


def test_layerstack_validates_shapes():
    with pytest.raises(ValueError):
        LayerStack([3, 2], ["tanh", "tanh"])
    with pytest.raises(ValueError):
        LayerStack([3, 2], ["swish"])
    with pytest.raises(ValueError):
        LayerStack([3, 2], ["linear"], params={"W0": np.zeros((2, 2)), "b0": np.zeros(2)})


def test_copy_is_deep_and_keeps_metadata():
    st = LayerStack([3, 2], ["linear"], rng=0)
    st.classes = np.array([4, 7])
    cp = st.copy()
    cp.params["W0"][0, 0] += 1
    assert st.params["W0"][0, 0] != cp.params["W0"][0, 0]
    assert np.array_equal(cp.classes, st.classes)


def test_gp_unit_norm_linear_is_zero():
    w = np.array([[0.6], [0.8]])
    d = linear_stack(w)
    rng = np.random.default_rng(0)
    gp = gradient_penalty(d, rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.uniform(size=5))
    assert gp.item() == pytest.approx(0.0, abs=1e-14)


def test_gp_slope_two_is_one():
    d = linear_stack([[2.0]])
    gp = gradient_penalty(d, np.ones((4, 1)), np.zeros((4, 1)), np.full(4, 0.3))
    assert gp.item() == pytest.approx(1.0, abs=1e-14)


def test_gp_matches_finite_difference_norms():
    rng = np.random.default_rng(3)
    d = LayerStack([3, 5, 1], ["leaky_relu", "linear"], rng=rng)
    x1, x2, mix = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.uniform(size=6)
    xh = mix[:, None] * x1 + (1 - mix[:, None]) * x2
    h = 1e-6
    fd = np.zeros_like(xh)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd[:, j] = (d.predict(xh + e)[:, 0] - d.predict(xh - e)[:, 0]) / (2 * h)
    norms = interpolate_grad_norms(d, x1, x2, mix)
    np.testing.assert_allclose(norms, np.linalg.norm(fd, axis=1), rtol=1e-4)
    assert gradient_penalty(d, x1, x2, mix).item() == pytest.approx(np.mean((np.linalg.norm(fd, axis=1) - 1) ** 2), rel=1e-4)


def test_gp_is_differentiable_in_critic_weights():
    rng = np.random.default_rng(4)
    d = LayerStack([2, 4, 1], ["tanh", "linear"], rng=rng)
    x1, x2, mix = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.uniform(size=3)
    pv = d.vars()
    (g,) = gradients(gradient_penalty(d, x1, x2, mix, pv), [pv["W0"]])
    h = 1e-6
    w = d.params["W0"]
    fd = np.zeros_like(w)
    for i in np.ndindex(w.shape):
        for sgn in (1, -1):
            p = {k: v.copy() for k, v in d.params.items()}
            p["W0"][i] += sgn * h
            fd[i] += sgn * gradient_penalty(LayerStack(d.widths, d.activations, params=p), x1, x2, mix).item() / (2 * h)
    np.testing.assert_allclose(g.data, fd, rtol=1e-4, atol=1e-8)


def test_wgan_zero_steps_is_noop():
    rng = np.random.default_rng(0)
    g = LayerStack([2, 4, 2], ["tanh", "linear"], rng=rng)
    d = LayerStack([2, 4, 1], ["leaky_relu", "linear"], rng=rng)
    before = g.checksum()
    rep = wgan_pretrain(g, d, rng.standard_normal((20, 2)), steps=0)
    assert g.checksum() == before and rep.counters["gen_updates"] == 0


def test_wgan_critic_schedule():
    rng = np.random.default_rng(0)
    g = LayerStack([2, 4, 2], ["tanh", "linear"], rng=rng)
    d = LayerStack([2, 4, 1], ["leaky_relu", "linear"], rng=rng)
    rep = wgan_pretrain(g, d, rng.standard_normal((20, 2)), steps=3, n_critic=5, batch_size=8)
    assert rep.counters == {"disc_updates": 15, "gen_updates": 3}


def _separable(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 6))
    y = (x @ np.array([1.0, -1, 0.5, 0, 0, 2]) > 0).astype(int)[:, None]
    return x, y


def test_task_model_learns_separable_attribute():
    x, y = _separable(300, 0)
    xv, yv = _separable(200, 1)
    enc = LayerStack([6, 8], ["tanh"], rng=0)
    head = LayerStack([8, 1], ["linear"], rng=1)
    rep = train_task_model(enc, head, x, y, epochs=30, lr=1e-2, x_val=xv, y_val=yv)
    assert rep.final_metric >= 0.95


def test_task_model_zero_epochs_and_shuffled_labels():
    x, y = _separable(400, 2)
    enc = LayerStack([6, 8], ["tanh"], rng=0)
    head = LayerStack([8, 1], ["linear"], rng=1)
    e0, h0 = enc.checksum(), head.checksum()
    train_task_model(enc, head, x, y, epochs=0)
    assert (enc.checksum(), head.checksum()) == (e0, h0)
    shuffled = np.random.default_rng(5).permutation(y)
    train_task_model(enc, head, x[:200], shuffled[:200], epochs=5, lr=1e-2)
    assert abs(utility_score(head, enc.predict(x[200:]), shuffled[200:]) - 0.5) <= 0.1


def _blobs(k, per, seed, spread=0.3):
    rng = np.random.default_rng(seed)
    centres = np.random.default_rng(99).standard_normal((k, 10)) * 3
    ids = np.repeat(np.arange(k), per)
    return centres[ids] + spread * rng.standard_normal((k * per, 10)), ids


def test_identity_oracle_separated_identities():
    x, ids = _blobs(4, 20, 0)
    xt, idt = _blobs(4, 10, 1)
    orc = train_identity_oracle(x, ids, epochs=30)
    assert np.mean(oracle_predict(orc, xt) == idt) >= 0.9


def test_identity_oracle_single_identity_degenerate():
    x = np.random.default_rng(0).standard_normal((5, 4))
    orc = train_identity_oracle(x, np.full(5, 3), epochs=5)
    assert orc.degenerate
    assert np.all(oracle_predict(orc, x) == 3)


def test_identity_oracle_shuffled_ids_near_chance():
    x, ids = _blobs(5, 40, 0, spread=3.0)
    xt, idt = _blobs(5, 40, 1, spread=3.0)
    rng = np.random.default_rng(2)
    orc = train_identity_oracle(x, rng.permutation(ids), epochs=10)
    acc = np.mean(oracle_predict(orc, xt) == rng.permutation(idt))
    assert abs(acc - 0.2) <= 0.12


def test_identity_oracle_remaps_labels():
    x, ids = _blobs(3, 10, 0)
    orc = train_identity_oracle(x, ids * 10 + 7, epochs=20)
    assert set(oracle_predict(orc, x)) <= {7, 17, 27}
    with pytest.raises(ValueError):
        train_identity_oracle(x[:4], np.array([0, 1, 2, 2]), epochs=1)


def test_amortizer_zero_steps_and_linear_pseudoinverse():
    rng = np.random.default_rng(0)
    gen = linear_stack(rng.standard_normal((3, 8)))
    enc = linear_stack(rng.standard_normal((8, 5)))
    amor = LayerStack([5, 3], ["linear"], rng=1)
    before = amor.checksum()
    train_amortizer(enc, gen, amor, steps=0)
    assert amor.checksum() == before
    train_amortizer(enc, gen, amor, steps=3000, lr=1e-2)
    z = rng.standard_normal((50, 3))
    resid = np.linalg.norm(z - amor.predict(enc.predict(gen.predict(z))), axis=1)
    assert resid.max() <= 1e-2


def test_autoencoder_reduces_loss():
    x = np.random.default_rng(0).uniform(size=(64, 12))
    enc = LayerStack([12, 6], ["tanh"], rng=0)
    dec = LayerStack([6, 12], ["sigmoid"], rng=1)
    rep = train_autoencoder(enc, dec, x, epochs=20, lr=1e-2)
    assert rep.losses[-1] < rep.losses[0]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    enc = LayerStack([12, 6], ["tanh"], rng=rng)
    oracle = train_identity_oracle(rng.uniform(size=(8, 12)), np.repeat([3, 5], 4), epochs=2)
    bundle = ModelBundle(
        enc=enc,
        task_head=LayerStack([6, 1], ["linear"], rng=rng),
        gen=LayerStack([2, 12], ["sigmoid"], rng=rng),
        disc=LayerStack([12, 4, 1], ["leaky_relu", "linear"], rng=rng),
        id_oracle=oracle,
    )
    bundle.save(tmp_path / "m.fcn")
    back = ModelBundle.load(tmp_path / "m.fcn")
    assert back.checksum() == bundle.checksum()
    assert np.array_equal(back.id_oracle.classes, [3, 5])
    x = rng.uniform(size=(3, 12))
    assert np.array_equal(oracle_predict(back.id_oracle, x), oracle_predict(oracle, x))


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "x")


def test_save_tensors_preserves_bits(tmp_path):
    t = {"a": np.array([[1.0, np.pi]]), "b": np.array([np.nextafter(1.0, 2.0)])}
    save_tensors(tmp_path / "t", t)
    back = load_tensors(tmp_path / "t")
    assert all(back[k].tobytes() == t[k].tobytes() for k in t)


def test_bundle_validates_widths():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ModelBundle(
            enc=LayerStack([12, 6], ["tanh"], rng=rng),
            task_head=LayerStack([5, 1], ["linear"], rng=rng),
            gen=LayerStack([2, 12], ["sigmoid"], rng=rng),
            disc=LayerStack([12, 1], ["linear"], rng=rng),
        )
