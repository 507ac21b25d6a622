"""Acceptance suite: one PASS/FAIL line per primary criterion, printed to the terminal."""
import math
import time

import numpy as np
import pytest
import torch

from _util import naive_psnr, naive_ssim, smooth_image, write_images
from reflectsep import cli, imaging, losses, networks, synthesis, training
from reflectsep.networks import Variant
from reflectsep.synthesis import ImageSet, SynthModelKind as K

GOLDEN_COUNTS = {Variant.B1: 15_845_512, Variant.B2: 13_051_659,
                 Variant.B3: 13_051_788, Variant.MASK: 13_560_652}


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[ACCEPTANCE] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return emit


def test_synthesis_validity(verdict):
    start = time.perf_counter()
    worst_lo, worst_hi = math.inf, -math.inf
    for i, kind in enumerate(K):
        g = np.random.default_rng([100, i])
        for _ in range(100):
            t, r = g.uniform(size=(2, 64, 64, 3))
            y = synthesis.synthesize(t, r, synthesis.sample_params({kind}, g))
            worst_lo, worst_hi = min(worst_lo, y.min()), max(worst_hi, y.max())
    g = np.random.default_rng(5)
    t, r = g.uniform(size=(2, 64, 64, 3))
    p = synthesis.SynthParams(K.LINEAR, 1.0, 2.0, 4, 4, 0.5)
    identity = np.array_equal(synthesis.synthesize(t, r, p), t)
    elapsed = time.perf_counter() - start
    ok = worst_lo >= 0 and worst_hi <= 1 and identity and elapsed < 30
    verdict("synthesis validity", ok,
            f"pixel range [{worst_lo:.4f}, {worst_hi:.4f}], w=1 identity {identity}, "
            f"{elapsed:.1f} s (< 30 s)")


def test_parameter_regime(verdict):
    g = np.random.default_rng(2024)
    ps = [synthesis.sample_params(synthesis.ALL_KINDS, g) for _ in range(10_000)]
    w_mean = float(np.mean([p.w for p in ps]))
    inside = all(0.5 <= p.w <= 0.7 and 2 <= p.sigma <= 5 and 4 <= p.ghost_dx <= 16
                 and 4 <= p.ghost_dy <= 16 and 0.4 <= p.ghost_alpha <= 0.8 for p in ps)
    ok = 0.594 <= w_mean <= 0.606 and inside
    verdict("parameter regime", ok, f"w mean {w_mean:.5f} in [0.594, 0.606], ranges ok {inside}")


def test_metric_oracles(verdict):
    g = np.random.default_rng(77)
    d_psnr = d_ssim = 0.0
    for _ in range(20):
        a, b = g.uniform(size=(2, 32, 32, 3))
        d_psnr = max(d_psnr, abs(imaging.psnr(a, b) - naive_psnr(a, b)))
        d_ssim = max(d_ssim, abs(imaging.ssim(a, b) - naive_ssim(a, b)))
    base = np.full((32, 32, 3), 0.4)
    d20 = abs(imaging.psnr(base, base + 0.1) - 20.0)
    ok = d_psnr < 1e-6 and d_ssim < 1e-6 and d20 < 1e-9
    verdict("metric oracles", ok,
            f"max |dPSNR| {d_psnr:.2e}, max |dSSIM| {d_ssim:.2e}, |PSNR(0.1) - 20| {d20:.2e}")


def _shape_problems(variant, batch):
    m = networks.init_model(variant, np.random.default_rng(0))
    y = torch.rand(batch, 3, 128, 128)
    problems = []

    def expect(what, got, want):
        if tuple(got) != tuple(want):
            problems.append(f"{variant.value}/{batch} {what} {tuple(got)} != {tuple(want)}")

    with torch.no_grad():
        enc = networks.encode(m, y)
        for f, want in zip(enc.features, [(32, 64), (64, 32), (128, 16), (256, 8), (256, 4)]):
            expect("feature", f.shape, (batch, want[0], want[1], want[1]))
        expect("bottleneck", enc.bottleneck.shape, (batch, 128, 4, 4))
        for b in m.branches:
            expect(f"decode {b}", networks.decode(m, b, enc).shape,
                   (batch, 1 if b == "m" else 3, 128, 128))
        x = torch.rand(batch, 3, 128, 128)
        cond = y if m.conditional else None
        for which in ("t", "r"):
            expect(f"D_{which}", networks.discriminate(m, which, x, cond).shape, (batch, 1, 4, 4))
        out = networks.separate(m, y)
        for k, v in out.items():
            want = {"w_y": (batch,), "mask": (batch, 1, 128, 128)}.get(k, (batch, 3, 128, 128))
            expect(k, v.shape, want)
    count = networks.count_parameters(m)
    if count != GOLDEN_COUNTS[variant]:
        problems.append(f"{variant.value} parameter count {count}")
    return problems


def _aliasing_holds(variant, sources):
    mode = training.Mode.WEAK if variant is Variant.MASK else training.Mode.SUPERVISED
    c = training.TrainConfig(variant=variant, mode=mode, steps=10, batch_size=2, image_size=32,
                             width_div=8)
    state = training.init_state(c)

    def storage(m):
        dec = m.decoders
        return [[dec[b].blocks[i].conv.weight.data_ptr() for i in range(networks.SHARED_LAYERS)]
                for b in m.branches]

    before = storage(state.model)
    src = training.make_sources(c, *sources)
    for step in range(10):
        training.train_step(state, c, training.make_batch(c, src, step))
    after = storage(state.model)
    return before == after and all(row == before[0] for row in before)


def test_architecture_shape_suite(verdict):
    problems = []
    for variant in Variant:
        for batch in (1, 4):
            problems += _shape_problems(variant, batch)
    g = np.random.default_rng(3)
    sources = (ImageSet.from_arrays([smooth_image(g, 64) for _ in range(3)]),
               ImageSet.from_arrays([smooth_image(g, 64) for _ in range(3)]))
    for variant in (Variant.B2, Variant.B3, Variant.MASK):
        if not _aliasing_holds(variant, sources):
            problems.append(f"{variant.value} aliasing broken")
    verdict("architecture shape suite", not problems,
            "all shapes, golden counts and shared storage ok" if not problems
            else "; ".join(problems[:5]))


def test_gradient_suite(verdict):
    start = time.perf_counter()
    worst, failures, n = 0.0, [], 0
    for variant in Variant:
        for kind in training.LOSS_KINDS:
            if kind == "content" and variant not in (Variant.B3, Variant.MASK):
                continue
            rep = training.grad_check(variant, kind, rel_tol=1e-3, n_coords=64)
            n += 1
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                failures.append(f"{variant.value}/{kind} {rep.max_rel_err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    verdict("gradient suite", ok,
            f"{n} checks x 64 coords, max rel err {worst:.2e} (< 1e-3), {elapsed:.0f} s (< 300 s)"
            + (f", failing {failures}" if failures else ""))


@pytest.mark.slow
def test_optimization_smoke(verdict):
    start = time.perf_counter()
    g = np.random.default_rng(0)
    ts = ImageSet.from_arrays([smooth_image(g) for _ in range(4)])
    rs = ImageSet.from_arrays([smooth_image(g) for _ in range(4)])
    pairs = synthesis.build_batch(ts, rs, {K.LINEAR}, 4, np.random.default_rng(1), out_size=64)
    y, t, r = (networks.images_to_tensor(a) for a in synthesis.stack_pairs(pairs))
    batch = training.SupervisedBatch(y, t, r)
    c = training.TrainConfig(variant="b3", kinds="linear", steps=2000, batch_size=4,
                             image_size=64, width_div=2, seed=0)
    state = training.init_state(c)
    totals = []
    for _ in range(2000):
        state, rep = training.train_step(state, c, batch)
        totals.append(rep.values()["total"])
    m = state.model
    m.eval()
    with torch.no_grad():
        t_hat = networks.tensor_to_images(networks.separate(m, y)["t_hat"])
    truth = networks.tensor_to_images(t)
    psnr = float(np.mean([imaging.psnr(a, b) for a, b in zip(truth, t_hat)]))
    drop = 1 - totals[-1] / totals[0]
    elapsed = time.perf_counter() - start
    ok = psnr >= 25 and drop >= 0.5 and elapsed < 1200
    verdict("optimization smoke", ok,
            f"PSNR(t, t_hat) {psnr:.2f} dB (>= 25), total {totals[0]:.2f} -> {totals[-1]:.2f} "
            f"({100 * drop:.0f}% drop, >= 50%), {elapsed:.0f} s (< 1200 s)")


def test_weak_supervision_contract(verdict, monkeypatch):
    g = np.random.default_rng(8)
    t_src = ImageSet.from_arrays([smooth_image(g, 64) for _ in range(20)], "t")
    r_src = ImageSet.from_arrays([smooth_image(g, 64) for _ in range(20)], "r")
    c = training.TrainConfig(variant="mask", mode="weak", steps=500, batch_size=4,
                             image_size=64, width_div=8, seed=2)

    # Poison the paired ground truth right after y is synthesized: any read turns a loss NaN.
    real_stack = synthesis.stack_pairs

    def poisoned(pairs):
        y, t, r = real_stack(pairs)
        return y, np.full_like(t, np.nan), np.full_like(r, np.nan)

    monkeypatch.setattr(synthesis, "stack_pairs", poisoned)

    # Real pools may only reach discriminators, and only as the real-side input.
    pools, misuse = [], []
    real_batch, real_disc = training.make_batch, networks.discriminate
    watched = [losses.l1_term, losses.l2_term, losses.feature_distance, networks.forward]

    def spy_batch(*a, **kw):
        b = real_batch(*a, **kw)
        pools[:] = [b.t_pool, b.r_pool]
        return b

    def is_pool(x):
        return isinstance(x, torch.Tensor) and any(x is p for p in pools)

    def spy_disc(m, which, x, cond=None):
        if is_pool(cond) or (is_pool(x) and x is not pools["tr".index(which)]):
            misuse.append(f"discriminate {which}")
        return real_disc(m, which, x, cond)

    def guard(fn, name):
        def inner(*a, **kw):
            if any(is_pool(v) for v in (*a, *kw.values())):
                misuse.append(name)
            return fn(*a, **kw)
        return inner

    monkeypatch.setattr(training, "make_batch", spy_batch)
    monkeypatch.setattr(networks, "discriminate", spy_disc)
    for fn in watched:
        module = networks if fn is networks.forward else losses
        monkeypatch.setattr(module, fn.__name__, guard(fn, fn.__name__))

    finite, mask_lo, mask_hi = True, math.inf, -math.inf
    start = time.perf_counter()

    def on_step(step, rep):
        nonlocal finite
        finite = finite and all(math.isfinite(v) for v in rep.values().values())

    try:
        state = training.fit(c, t_src, r_src, on_step=on_step)
        error = ""
    except training.NonFiniteLossError as exc:
        state, error, finite = None, str(exc), False
    if state is not None:
        state.model.eval()
        with torch.no_grad():
            y = training.make_batch(c, training.make_sources(c, t_src, r_src), 10_000).y
            mask = networks.separate(state.model, y)["mask"]
        mask_lo, mask_hi = float(mask.min()), float(mask.max())
    elapsed = time.perf_counter() - start
    ok = (state is not None and state.step == 500 and finite and not misuse
          and 0 <= mask_lo and mask_hi <= 1)
    verdict("weak-supervision contract", ok,
            f"500 steps finite {finite}{' (' + error + ')' if error else ''}, "
            f"pool misuse {sorted(set(misuse)) or 'none'}, mask range [{mask_lo:.3f}, {mask_hi:.3f}], "
            f"{elapsed:.0f} s")


def test_determinism_and_resume(verdict, tmp_path):
    g = np.random.default_rng(9)
    t_dir = write_images(tmp_path / "t", [smooth_image(g, 64) for _ in range(4)], "t")
    r_dir = write_images(tmp_path / "r", [smooth_image(g, 64) for _ in range(4)], "r")

    def cfg(name, steps, **extra):
        values = dict(variant="b3", steps=steps, batch_size=2, image_size=32, width_div=8,
                      seed=4, checkpoint_every=2, t_dir=t_dir, r_dir=r_dir,
                      out_dir=tmp_path / name, **extra)
        path = tmp_path / f"{name}.cfg"
        path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
        return ["train", "--config", str(path)]

    codes = [cli.main(cfg("a", 4)), cli.main(cfg("b", 4)), cli.main(cfg("k", 2)),
             cli.main(cfg("k", 4, resume=tmp_path / "k" / "ckpt_000002.rsc"))]
    final = [(tmp_path / n / "ckpt_000004.rsc").read_bytes() for n in ("a", "b", "k")]
    same_runs = final[0] == final[1]
    resumed = final[0] == final[2]
    ok = codes == [0] * 4 and same_runs and resumed
    verdict("determinism and resume", ok,
            f"exit codes {codes}, repeated runs identical {same_runs}, "
            f"resume at 2 == uninterrupted at 4 {resumed}")


def test_half_split_protocol(verdict):
    files = [f"cafe_{i:03d}.jpg" for i in range(178)]
    a, b = training.split_halves(files, seed=0)
    again = training.split_halves(list(reversed(files)), seed=0)
    ok = (len(a), len(b)) == (89, 89) and not set(a) & set(b) and (a, b) == again
    verdict("half-split protocol", ok,
            f"sizes {len(a)}/{len(b)}, disjoint {not set(a) & set(b)}, stable {(a, b) == again}")
