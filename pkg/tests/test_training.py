import numpy as np
import pytest
import torch

from _util import smooth_image
from reflectsep import networks, training
from reflectsep.networks import Variant
from reflectsep.synthesis import ImageSet
from reflectsep.training import Mode, TrainConfig


@pytest.fixture(scope="module")
def sources():
    g = np.random.default_rng(21)
    return (ImageSet.from_arrays([smooth_image(g, 64) for _ in range(4)], "t"),
            ImageSet.from_arrays([smooth_image(g, 64) for _ in range(4)], "r"))


def config(variant="b2", **kw):
    mode = Mode.WEAK if Variant.parse(variant) is Variant.MASK else Mode.SUPERVISED
    base = dict(variant=variant, mode=mode, steps=2, batch_size=2, image_size=32, width_div=8,
                seed=3)
    return TrainConfig(**{**base, **kw})


def snapshot(params):
    return [p.detach().clone() for p in params]


def changed(before, params):
    return [not torch.equal(a, b) for a, b in zip(before, params)]


@pytest.mark.parametrize("n,sizes", [(10, (5, 5)), (11, (6, 5)), (178, (89, 89))])
def test_split_halves_sizes_and_disjointness(n, sizes):
    files = [f"f{i:03d}.png" for i in range(n)]
    a, b = training.split_halves(files, seed=4)
    assert (len(a), len(b)) == sizes
    assert not set(a) & set(b) and set(a) | set(b) == set(files)
    assert training.split_halves(list(reversed(files)), seed=4) == (a, b)
    assert training.split_halves(files, seed=5) != (a, b)


def test_split_halves_needs_two():
    with pytest.raises(ValueError, match="at least 2"):
        training.split_halves(["only.png"])


def test_config_roundtrip_and_errors():
    c = config("mask", kinds="linear,ghost", lambda1=3.5)
    assert training.parse_config(training.format_config(c)) == c
    text = "variant = b1\nsteps = 5  # short\n\nkinds = all\n"
    parsed = training.parse_config(text)
    assert parsed.variant is Variant.B1 and parsed.steps == 5 and parsed.batch_size == 16
    with pytest.raises(ValueError, match="unknown config key 'stepz'"):
        training.parse_config("stepz = 3")
    with pytest.raises(ValueError, match="duplicate"):
        training.parse_config("steps = 3\nsteps = 4")
    with pytest.raises(ValueError, match="key = value"):
        training.parse_config("steps 3")
    with pytest.raises(ValueError, match="weak mode requires"):
        TrainConfig(variant="b3", mode="weak")
    with pytest.raises(ValueError, match="supervised mode requires"):
        TrainConfig(variant="mask", mode="supervised")
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0)


def test_batches_are_keyed_by_step(sources):
    c = config("b2")
    src = training.make_sources(c, *sources)
    a = training.make_batch(c, src, 7)
    b = training.make_batch(c, src, 7)
    other = training.make_batch(c, src, 8)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert not torch.equal(a.y, other.y)
    assert a.y.shape == (2, 3, 32, 32)


def test_weak_sources_use_disjoint_halves(sources):
    c = config("mask")
    src = training.make_sources(c, *sources)
    assert not set(src.t.names) & set(src.t_real.names)
    assert not set(src.r.names) & set(src.r_real.names)
    batch = training.make_batch(c, src, 0)
    assert isinstance(batch, training.WeakBatch)
    assert batch.t_pool.shape == batch.r_pool.shape == (2, 3, 32, 32)


def test_zero_learning_rate_keeps_parameters(sources):
    c = config("b3", learning_rate=0.0)
    state = training.init_state(c)
    before = snapshot(state.model.parameters())
    batch = training.make_batch(c, training.make_sources(c, *sources), 0)
    training.train_step(state, c, batch)
    assert not any(changed(before, state.model.parameters()))


def test_supervised_step_updates_every_trained_parameter(sources):
    c = config("b2")
    state = training.init_state(c)
    m = state.model
    gen, disc = m.generator_parameters(), m.discriminator_parameters()
    g0, d0 = snapshot(gen), snapshot(disc)
    batch = training.make_batch(c, training.make_sources(c, *sources), 0)
    _, report = training.train_step(state, c, batch)
    # The bottleneck bias is a per-channel shift that the next layer's batch norm
    # cancels, so its gradient is exactly zero outside B3.
    frozen = m.encoder.blocks[-1].conv.bias
    assert [p is frozen for p in gen] == [not moved for moved in changed(g0, gen)]
    assert all(changed(d0, disc))
    assert set(report.values()) >= {"adv_t", "l1_y", "d_t", "d_r", "total"}
    assert state.step == 1


def test_mask_alternation_by_parity(sources):
    c = config("mask")
    state = training.init_state(c)
    m = state.model
    src = training.make_sources(c, *sources)
    main, mask, disc = m.main_generator_parameters(), m.mask_parameters(), m.discriminator_parameters()
    for step in range(4):
        snaps = [snapshot(ps) for ps in (main, mask, disc)]
        training.train_step(state, c, training.make_batch(c, src, step))
        moved_main, moved_mask, moved_disc = (any(changed(s, ps))
                                              for s, ps in zip(snaps, (main, mask, disc)))
        assert moved_disc
        assert (moved_main, moved_mask) == ((True, False) if step % 2 == 0 else (False, True))


def test_sharing_survives_training(sources):
    c = config("mask", steps=10)
    state = training.fit(c, *sources)
    dec = state.model.decoders
    for b in ("r", "y", "m"):
        for i in range(networks.SHARED_LAYERS):
            assert dec[b].blocks[i].conv.weight is dec["t"].blocks[i].conv.weight
    assert len(state.model.sharing_map()) == 54


def test_heavy_l1_weight_on_repeated_batch(sources):
    c = config("b2", lambda1=1e6, batch_size=4)
    state = training.init_state(c)
    batch = training.make_batch(c, training.make_sources(c, *sources), 0)
    history = []
    for _ in range(50):
        _, report = training.train_step(state, c, batch)
        history.append(report.values()["l1_t"])
    assert all(b < a for a, b in zip(history, history[1:])), history


def test_non_finite_loss_raises(sources):
    c = config("b1")
    state = training.init_state(c)
    batch = training.make_batch(c, training.make_sources(c, *sources), 0)
    bad = training.SupervisedBatch(batch.y, batch.t * float("nan"), batch.r)
    with pytest.raises(training.NonFiniteLossError, match="d_t") as info:
        training.train_step(state, c, bad)
    assert info.value.step == 0


def test_fit_writes_log_and_checkpoints(tmp_path, sources):
    c = config("b1", steps=3, checkpoint_every=2, out_dir=str(tmp_path / "run"))
    training.fit(c, *sources)
    names = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert names == ["ckpt_000002.rsc", "ckpt_000003.rsc", "train_log.tsv"]
    lines = (tmp_path / "run" / "train_log.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "step" and len(lines) == 4
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0", "1", "2"]

    c = config("b1", steps=2, checkpoint_every=1, out_dir=str(tmp_path / "two"))
    training.fit(c, *sources)
    assert len(list((tmp_path / "two").glob("ckpt_*.rsc"))) == 2


def test_resume_rejects_variant_mismatch(tmp_path, sources):
    c = config("b1", steps=1, out_dir=str(tmp_path))
    training.fit(c, *sources)
    with pytest.raises(ValueError, match="does not match"):
        training.fit(config("b2", steps=2, resume=str(tmp_path / "ckpt_000001.rsc")), *sources)


@pytest.mark.parametrize("variant,kind", [("b1", "full"), ("b3", "content"), ("mask", "adv_d")])
def test_grad_check_passes(variant, kind):
    report = training.grad_check(variant, kind, n_coords=12)
    assert report.passed, report.max_rel_err
    assert report.n_coords == 12


def test_grad_check_rejects_bad_kind():
    with pytest.raises(ValueError, match="unknown loss kind"):
        training.grad_check("b1", "bogus", n_coords=1)
    with pytest.raises(ValueError, match="content loss check"):
        training.grad_check("b2", "content", n_coords=1)


def test_relative_error():
    assert training.relative_error(1.0, 1.0) == 0.0
    assert training.relative_error(2.0, 1.0) == 0.5
    assert training.relative_error(1e-9, 0.0) == pytest.approx(1e-9 / training.GRAD_FLOOR)


def test_five_point_stencil_is_exact_on_quartics():
    f = lambda x: 3 * x**4 - x**3 + 2 * x  # noqa: E731
    h, x = 0.1, 0.7
    numeric = sum(w * f(x + k * h) for k, w in training.STENCIL.items()) / h
    assert numeric == pytest.approx(12 * x**3 - 3 * x**2 + 2, rel=1e-12)


def test_grad_check_skips_kinks_and_cleans_up():
    from reflectsep import losses
    report = training.grad_check("b1", "pixel", n_coords=16, step=1e-2)
    assert report.skipped > 0 and report.n_coords == 16
    assert report.passed, report.max_rel_err
    assert losses.KINK_OBSERVERS == []
