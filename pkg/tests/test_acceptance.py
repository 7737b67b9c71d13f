"""Acceptance criteria, one test per criterion.

Each test finishes by printing ``ACCEPTANCE <criterion>: PASS`` (run with
``-s`` to see the lines; a failed assertion surfaces as the test's FAILED
line). The desk-scale block synthesizes the 100-pair phantom cohort at
32x32x8 and trains ablation modes 2/3/4/5/6 once in a session fixture;
those five runs dominate the suite's wall time.
"""

import hashlib
import time

import numpy as np
import pytest
import torch

from memwarp import io as volio
from memwarp.cli import main as cli_main
from memwarp.data import PhantomSpec, load_split_pairs, synth_dataset
from memwarp.fieldops import (
    DisplacementField,
    GridShape,
    ImageVolume,
    VelocityField,
    identity_displacement,
    integrate_velocity,
    jacobian_determinant,
    warp,
    warp_tensor,
)
from memwarp.memory import MemoryBank, address, apply_dynamic_filters, generate_filters
from memwarp.metrics import (
    dice_score,
    evaluate_pair,
    hd95,
    nonpositive_jacobian_fraction,
    sdlogj,
)
from memwarp.network import LapWarp, NetworkConfig
from memwarp.memory import MemoryConfig
from memwarp.objective import (
    LossWeights,
    composite_loss,
    gradient_l2,
    mse,
    one_hot_volume,
    region_loss_tensor,
    warped_dice_loss,
)
from memwarp.training import (
    AblationFlags,
    TrainConfig,
    load_checkpoint,
    predict_field,
    train,
)

from test_fieldops import euler_flow_oracle, smooth_random_velocity
from test_gradients import check_tensor_grad, fd_grad, rel_err, safe_random_field
from test_metrics import brute_hd95, cube

DESK_SPEC = PhantomSpec(subjects=50, seed=0)  # 32x32x8, 100 directed pairs
DESK_STEPS = 400
TRAIN_BUDGET_S = 15 * 60


def _pass(name):
    print(f"\nACCEPTANCE {name}: PASS", flush=True)


# ---------------------------------------------------------------------------
# Desk-scale fixtures (shared by the training-dependent criteria)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_phantom")
    synth_dataset(DESK_SPEC, root)
    return root


@pytest.fixture(scope="session")
def test_pairs(desk_dataset):
    return load_split_pairs(desk_dataset, "test", with_masks=True)


@pytest.fixture(scope="session")
def initial_dice(test_pairs):
    vals = [
        evaluate_pair(
            p.fixed_seg, p.moving_seg, identity_displacement(p.fixed_seg.grid),
            pair_id=p.pair_id,
        ).dice_avg
        for p in test_pairs
    ]
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def mode_runs(desk_dataset, test_pairs, tmp_path_factory):
    """Train modes 2/3/4/5/6 at desk scale and evaluate each on the test
    split. Asserts the per-run step and wall-clock budgets."""
    out = {}
    for mode in (2, 3, 4, 5, 6):
        run_dir = tmp_path_factory.mktemp(f"mode{mode}")
        cfg = TrainConfig(steps=DESK_STEPS, seed=0, ablation=AblationFlags.from_mode(mode))
        assert cfg.steps <= 1500
        t0 = time.time()
        result = train(cfg, desk_dataset, run_dir)
        elapsed = time.time() - t0
        assert elapsed <= TRAIN_BUDGET_S, f"mode {mode} run took {elapsed:.0f}s"

        ckpt = load_checkpoint(result.checkpoint_path)
        dices, sdls, fold_fracs = [], [], []
        for p in test_pairs:
            disp = predict_field(ckpt.model, p.moving_image, p.fixed_image)
            rep = evaluate_pair(p.fixed_seg, p.moving_seg, disp, pair_id=p.pair_id)
            dices.append(rep.dice_avg)
            sdls.append(rep.sdlogj)
            if cfg.ablation.pyramid:
                m = torch.from_numpy(p.moving_image.data).float().reshape(1, 1, *p.moving_image.data.shape)
                f = torch.from_numpy(p.fixed_image.data).float().reshape(1, 1, *p.fixed_image.data.shape)
                with torch.no_grad():
                    state = ckpt.model(m, f)
                for lvl in range(2, cfg.levels + 1):
                    delta = state.delta[lvl - 1]
                    # det J needs >= 3 voxels per axis; the coarsest desk
                    # level (8x8x2) is below the Jacobian's domain
                    if min(delta.shape[2:]) >= 3:
                        vec = np.moveaxis(delta.squeeze(0).numpy(), 0, -1)
                        fold_fracs.append(
                            nonpositive_jacobian_fraction(DisplacementField(vectors=vec))
                        )
        out[mode] = {
            "ckpt": result.checkpoint_path,
            "dice": float(np.mean(dices)),
            "sdlogj": float(np.mean(sdls)),
            "fold_fracs": fold_fracs,
            "seconds": elapsed,
        }
        print(f"\n[desk-scale] mode {mode}: dice {out[mode]['dice']:.4f} "
              f"sdlogj {out[mode]['sdlogj']:.4f} ({elapsed:.0f}s)", flush=True)
    return out


# ---------------------------------------------------------------------------
# Criterion: field-ops oracle suite (runtime < 10 s)
# ---------------------------------------------------------------------------

class TestFieldOpsOracleSuite:
    def test_criterion(self):
        t0 = time.time()
        rng = np.random.default_rng(0)

        vol = ImageVolume(data=rng.random((6, 6, 6)))
        ident = identity_displacement(vol.grid)
        for interp in ("trilinear", "nearest"):
            assert np.array_equal(warp(vol, ident, interp=interp).data, vol.data)

        const = VelocityField(vectors=np.broadcast_to([0.5, 0, 0], (8, 8, 8, 3)).copy())
        u = integrate_velocity(const, steps=7)
        err = np.abs(u.vectors[2:-2, 2:-2, 2:-2] - np.array([0.5, 0, 0])).max()
        assert err < 1e-5

        for seed in (7, 8, 9):
            vel = smooth_random_velocity(seed, (8, 8, 8), amp=0.5)
            got = integrate_velocity(VelocityField(vectors=vel), steps=7).vectors
            want = euler_flow_oracle(vel, n_steps=128)
            assert np.abs(got - want).max() < 1e-2

        grid = np.stack(np.meshgrid(*[np.arange(6)] * 3, indexing="ij"), axis=-1).astype(float)
        det = jacobian_determinant(DisplacementField(vectors=0.1 * grid))
        assert np.abs(det - 1.331).max() < 1e-6

        elapsed = time.time() - t0
        assert elapsed < 10, f"field-ops oracle suite took {elapsed:.1f}s"
        _pass(f"field-ops oracle suite ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion: gradient suite (double precision, rel err < 1e-2, < 60 s)
# ---------------------------------------------------------------------------

class TestGradientSuite:
    def test_criterion(self):
        t0 = time.time()
        rng = np.random.default_rng(1)

        # warp w.r.t. field (tighter 1e-3 tolerance)
        vol = torch.from_numpy(rng.random((1, 1, 6, 6, 6)))
        disp = safe_random_field((1, 3, 6, 6, 6), seed=2).requires_grad_()
        check_tensor_grad(lambda: warp_tensor(vol, disp).mean(), disp, h=1e-4, tol=1e-3)

        # memory path w.r.t. MLP weights
        torch.manual_seed(3)
        bank = MemoryBank(feature_dim=12, slots=4).double()
        query = torch.from_numpy(rng.normal(size=(16, 12)))
        ctx = torch.from_numpy(rng.normal(size=(16, 4)))

        def memory_loss():
            m = bank.matrix()
            flow = apply_dynamic_filters(generate_filters(address(query, m), m), ctx)
            return (flow**2).sum()

        for _, param in bank.named_parameters():
            loss = memory_loss()
            (grad,) = torch.autograd.grad(loss, param)
            idx = np.random.default_rng(4).choice(
                param.numel(), size=min(40, param.numel()), replace=False
            )
            numeric = fd_grad(memory_loss, param, idx, h=1e-6)
            assert rel_err(grad.detach().reshape(-1)[idx], numeric) < 1e-2

        # the four loss terms
        dims = (8, 8, 4)
        fixed = torch.from_numpy(rng.random((1, 1, *dims)))
        moving = torch.from_numpy(rng.random((1, 1, *dims)))
        fl = torch.from_numpy(rng.integers(0, 4, (1, *dims)))
        ml = torch.from_numpy(rng.integers(0, 4, (1, *dims)))

        d1 = safe_random_field((1, 3, *dims), seed=5).requires_grad_()
        check_tensor_grad(lambda: mse(fixed, warp_tensor(moving, d1)), d1, h=1e-4, tol=1e-2)
        d2 = safe_random_field((1, 3, *dims), seed=6).requires_grad_()
        check_tensor_grad(
            lambda: warped_dice_loss(fl, ml, d2, num_classes=4), d2, h=1e-4, tol=1e-2
        )
        d3 = safe_random_field((1, 3, *dims), seed=7).requires_grad_()
        check_tensor_grad(lambda: gradient_l2(d3), d3, h=1e-4, tol=1e-2)

        onehot = one_hot_volume(fl, 4, dtype=torch.float64)
        logits = torch.from_numpy(rng.normal(size=(1, 4, 4, 4, 2))).requires_grad_()
        check_tensor_grad(
            lambda: region_loss_tensor([None, torch.softmax(logits, dim=1)], onehot),
            logits, h=1e-5, tol=1e-2,
        )

        elapsed = time.time() - t0
        assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"
        _pass(f"gradient suite ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion: memory invariants
# ---------------------------------------------------------------------------

class TestMemoryInvariants:
    def test_criterion(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            slots = int(rng.integers(2, 7))
            feats = 3 * int(rng.integers(1, 6))
            m = torch.from_numpy(rng.normal(scale=rng.uniform(0.1, 3.0), size=(feats, slots)))
            q = torch.from_numpy(rng.normal(scale=5.0, size=(int(rng.integers(1, 40)), feats)))
            j = address(q, m)
            assert float(j.min()) >= 0 and float(j.max()) <= 1
            np.testing.assert_allclose(j.sum(dim=-1).numpy(), 1.0, atol=1e-5)

        m = torch.from_numpy(rng.normal(size=(24, 4)))
        one_hot = torch.zeros(12, 4, dtype=torch.float64)
        one_hot[:, 2] = 1.0
        w = generate_filters(one_hot, m).reshape(12, 24)
        for row in w:
            assert torch.equal(row, m[:, 2])

        j = torch.softmax(torch.from_numpy(rng.normal(size=(64, 4))), dim=-1)
        filt = generate_filters(j, m)
        ctx = torch.from_numpy(rng.normal(size=(64, 8)))
        flow = apply_dynamic_filters(filt, ctx)
        for s in range(64):
            flat = sum(j[s, k].item() * m[:, k].numpy() for k in range(4))
            np.testing.assert_allclose(filt[s].numpy().reshape(24), flat, atol=1e-6)
            np.testing.assert_allclose(
                flow[s].numpy(), filt[s].numpy() @ ctx[s].numpy(), atol=1e-6
            )
        _pass("memory invariants")


# ---------------------------------------------------------------------------
# Criterion: metric oracles
# ---------------------------------------------------------------------------

class TestMetricOracles:
    def test_criterion(self):
        a, b = cube(), cube(lo=(2, 0, 0))
        assert dice_score(a, b, 1) == pytest.approx(0.5, abs=1e-6)

        got = hd95(a, b, 1)
        assert got == pytest.approx(2.0, abs=1e-6)
        assert got == pytest.approx(brute_hd95(a.data == 1, b.data == 1, (1, 1, 1)), abs=1e-6)

        sp = (1.8, 1.8, 10.0)
        a2, b2 = cube(spacing=sp), cube(lo=(2, 0, 0), spacing=sp)
        got2 = hd95(a2, b2, 1)
        assert got2 == pytest.approx(3.6, abs=1e-6)
        assert got2 == pytest.approx(brute_hd95(a2.data == 1, b2.data == 1, sp), abs=1e-6)

        assert sdlogj(identity_displacement(GridShape(6, 6, 6))) == 0.0
        _pass("metric oracles")


# ---------------------------------------------------------------------------
# Criterion: pyramid structural invariant
# ---------------------------------------------------------------------------

class TestPyramidInvariant:
    def test_criterion(self):
        worst = 0.0
        for seed in range(20):
            torch.manual_seed(seed)
            cfg = NetworkConfig(levels=3, encoder_channels=(4, 8, 16))
            model = LapWarp(cfg, MemoryConfig(slots=4) if seed % 2 else None)
            g = torch.Generator().manual_seed(1000 + seed)
            moving = torch.rand(1, 1, 16, 16, 8, generator=g)
            fixed = torch.rand(1, 1, 16, 16, 8, generator=g)
            with torch.no_grad():
                state = model(moving, fixed)
            worst = max(worst, state.max_invariant_violation())
        assert worst < 1e-6, f"max invariant violation {worst:.2e}"

        torch.manual_seed(99)
        model = LapWarp(NetworkConfig(levels=3, encoder_channels=(4, 8, 16)), None)
        with torch.no_grad():
            for head in model.heads.values():
                head.conv.weight.zero_()
                head.conv.bias.zero_()
            g = torch.Generator().manual_seed(5)
            moving = torch.rand(1, 1, 16, 16, 8, generator=g)
            state = model(moving, moving)
        assert torch.count_nonzero(state.disp) == 0
        assert torch.equal(warp_tensor(moving, state.disp), moving)
        _pass("pyramid structural invariant (20 passes, zero-flow identity)")


# ---------------------------------------------------------------------------
# Criteria: desk-scale training
# ---------------------------------------------------------------------------

class TestDeskScaleTraining:
    def test_full_model_dice_gain(self, mode_runs, initial_dice):
        dice6 = mode_runs[6]["dice"]
        gain = (dice6 - initial_dice) * 100
        assert dice6 >= initial_dice + 0.15, (
            f"mode 6 dice {dice6:.4f} vs initial {initial_dice:.4f} (+{gain:.1f} pts)"
        )
        _pass(f"desk-scale dice gain (+{gain:.1f} points, "
              f"{initial_dice:.3f} -> {dice6:.3f})")

    def test_ablation_ordering(self, mode_runs):
        d = {m: mode_runs[m]["dice"] for m in (2, 3, 5, 6)}
        tol = 0.01  # ties allowed within one point
        assert d[6] >= d[5] - tol, f"mode6 {d[6]:.4f} < mode5 {d[5]:.4f} - {tol}"
        assert d[5] >= d[3] - tol, f"mode5 {d[5]:.4f} < mode3 {d[3]:.4f} - {tol}"
        assert d[3] >= d[2] - tol, f"mode3 {d[3]:.4f} < mode2 {d[2]:.4f} - {tol}"
        _pass("ablation ordering (6 >= 5 >= 3 >= 2: "
              + " >= ".join(f"{d[m]:.3f}" for m in (6, 5, 3, 2)) + ")")

    def test_no_dice_loss_folds_more(self, mode_runs):
        s4, s6 = mode_runs[4]["sdlogj"], mode_runs[6]["sdlogj"]
        assert s4 > s6, f"mode4 sdlogj {s4:.4f} <= mode6 {s6:.4f}"
        _pass(f"SDlogJ direction without dice loss ({s4:.3f} > {s6:.3f})")

    def test_diffeomorphic_residuals(self, mode_runs):
        fracs = mode_runs[6]["fold_fracs"]
        assert fracs, "no integrated levels with a valid Jacobian domain"
        frac = float(np.mean(fracs))
        worst = float(np.max(fracs))
        assert frac < 0.005, f"mean folding fraction {frac:.5f}"
        _pass(f"diffeomorphic residuals (mean fold {frac:.5f}, worst {worst:.5f})")


# ---------------------------------------------------------------------------
# Criterion: inference independence from masks
# ---------------------------------------------------------------------------

class TestInferenceIndependence:
    def test_criterion(self, mode_runs, desk_dataset, tmp_path):
        manifest_subj = sorted(p.name for p in desk_dataset.iterdir() if p.is_dir())[0]
        volio.reset_read_counts()
        code = cli_main([
            "register",
            "--checkpoint", str(mode_runs[6]["ckpt"]),
            "--moving", str(desk_dataset / manifest_subj / "ed_img.nii.gz"),
            "--fixed", str(desk_dataset / manifest_subj / "es_img.nii.gz"),
            "--out", str(tmp_path / "reg"),
        ])
        assert code == 0
        assert volio.read_counts()["label"] == 0
        assert (tmp_path / "reg" / "disp.nii.gz").exists()
        _pass("inference independence (register with zero mask reads)")


# ---------------------------------------------------------------------------
# Criterion: reproducibility under a fixed seed
# ---------------------------------------------------------------------------

class TestReproducibility:
    def test_criterion(self, tmp_path):
        spec = DESK_SPEC
        synth_dataset(spec, tmp_path / "a")
        synth_dataset(spec, tmp_path / "b")
        files = sorted(
            p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
        )
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

        cfg = TrainConfig(steps=80, seed=7)
        train(cfg, tmp_path / "a", tmp_path / "run1")
        train(cfg, tmp_path / "a", tmp_path / "run2")
        h1 = hashlib.sha256((tmp_path / "run1" / "train_log.csv").read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "run2" / "train_log.csv").read_bytes()).hexdigest()
        assert h1 == h2, "training logs differ between identically-seeded runs"

        for out in ("e1.csv", "e2.csv"):
            assert cli_main([
                "evaluate",
                "--checkpoint", str(tmp_path / "run1" / "checkpoint.zip"),
                "--data", str(tmp_path / "a"), "--split", "test",
                "--out", str(tmp_path / out),
            ]) == 0
        assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
        _pass(f"reproducibility (dataset bytes, train-log hash {h1[:12]}.., eval CSV)")
