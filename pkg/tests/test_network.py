import dataclasses

import numpy as np
import pytest

from mfeit import admm
from mfeit import autodiff as ad
from mfeit import dataset as dsmod
from mfeit import fem
from mfeit import network as net_mod
from mfeit.network import (
    MmvNetParams,
    NetState,
    TrainConfig,
    convlstm_forward,
    embed_to_grid,
    extract_from_grid,
    grid_embed,
    grid_extract,
    net_forward,
    net_multiplier_updates,
    net_x_update,
    net_z_update,
    reconstruct,
    sign_convention,
    ssa_forward,
    train,
)


@pytest.fixture(scope="module")
def grid16():
    return fem.build_pixel_grid(16, 16)


@pytest.fixture
def net16(grid16):
    # fresh per test: train-mode batchnorm calls mutate the running buffers
    return MmvNetParams(grid16, l=4, seed=3)


@pytest.fixture(scope="module")
def small_problem(grid16):
    rng = np.random.default_rng(0)
    m, n = 24, grid16.n
    A = rng.normal(size=(m, n)) / np.sqrt(n)
    B = rng.normal(size=(m, 8)) * 0.1  # two samples, l = 4
    return A, B


def make_state(rng, m, n, cols):
    return NetState(
        X=ad.Tensor(rng.normal(size=(n, cols))),
        Z=ad.Tensor(rng.normal(size=(n, cols))),
        L1=ad.Tensor(rng.normal(size=(n, cols))),
        L2=ad.Tensor(rng.normal(size=(m, cols))),
    )


class TestSignConvention:
    def test_involution(self):
        x = np.array([-0.5, 0.25])
        assert np.array_equal(
            sign_convention(sign_convention(x, "to_net"), "from_net"), x
        )

    def test_known_value_and_zero(self):
        assert sign_convention(np.array([-0.995]), "to_net")[0] == pytest.approx(0.995)
        assert sign_convention(np.array([0.0]))[0] == 0.0

    def test_rejects_bad_direction(self):
        with pytest.raises(ValueError):
            sign_convention(np.zeros(1), "sideways")


class TestEmbedExtract:
    def test_round_trip(self, grid16):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.normal(size=(grid16.n, 4)))
        g = embed_to_grid(x, grid16)
        assert g.data.shape == (4, 16, 16)
        back = extract_from_grid(g, grid16)
        assert np.array_equal(back.data, x.data)

    def test_all_ones_gives_mask(self, grid16):
        g = embed_to_grid(ad.Tensor(np.ones((grid16.n, 1))), grid16)
        assert np.array_equal(g.data[0], grid16.mask.astype(float))

    def test_inclusion_embedding_localized(self, grid16):
        groups = dsmod.ConductivityGroups()
        ph = dsmod.Phantom([dsmod.Inclusion((0.3, -0.2), 0.2, 1)])
        x = dsmod.normalize_conductivity(
            dsmod.rasterize_phantom(ph, grid16, groups, 0), 2.0
        )
        img = embed_to_grid(ad.Tensor(x[:, None]), grid16).data[0]
        ys, xs = np.nonzero(img)
        cy = (16 / 2 - ys - 0.5) * grid16.cell_size
        cx = (xs + 0.5 - 16 / 2) * grid16.cell_size
        dist = np.hypot(cx - 0.3, cy + 0.2)
        assert dist.max() <= 0.2

    def test_batched_round_trip(self, grid16):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.normal(size=(grid16.n, 12)))  # three samples
        g = grid_embed(x, grid16, 3, 4)
        assert g.data.shape == (3, 4, 16, 16)
        back = grid_extract(g, grid16, 3, 4)
        assert np.array_equal(back.data, x.data)


class TestXUpdate:
    def test_bitwise_match_with_classical(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(3)
        state = make_state(rng, A.shape[0], grid16.n, 8)
        eta, b1, b2 = 0.05, 0.8, 1.3
        out = net_x_update(state, A, B, eta, b1, b2)
        classical = admm.x_update_gd(
            admm.AdmmState(state.X.data, state.Z.data, state.L1.data, state.L2.data),
            admm.LinearizedModel(A, B),
            admm.AdmmParams(beta1=b1, beta2=b2, eta=eta),
        )
        assert np.array_equal(out.data, classical)

    def test_zero_step_size_freezes(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(4)
        state = make_state(rng, A.shape[0], grid16.n, 8)
        out = net_x_update(state, A, B, 0.0, 1.0, 1.0)
        assert np.array_equal(out.data, state.X.data)

    def test_gradient_via_eta(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(5)
        state = make_state(rng, A.shape[0], grid16.n, 8)
        eta_raw = ad.Parameter(np.array(ad.softplus_inverse(0.05)), "eta_raw")
        weight = rng.normal(size=state.X.data.shape)

        def loss():
            out = net_x_update(state, A, B, ad.softplus(eta_raw), 1.0, 1.0)
            return ad.sum_all(ad.mul(out, weight))

        tape = ad.Tape()
        with tape:
            value = loss()
        ad.backward(tape, value)
        analytic = float(eta_raw.grad)
        h = 1e-6
        keep = float(eta_raw.data)
        eta_raw.data = np.array(keep + h)
        up = loss().item()
        eta_raw.data = np.array(keep - h)
        dn = loss().item()
        eta_raw.data = np.array(keep)
        fd = (up - dn) / (2 * h)
        assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(fd))

    def test_full_state_gradients(self, grid16):
        rng = np.random.default_rng(6)
        m, n, cols = 6, 10, 4
        A = rng.normal(size=(m, n))
        B = rng.normal(size=(m, cols))
        X = ad.Tensor(rng.normal(size=(n, cols)), requires_grad=True)
        Z = ad.Tensor(rng.normal(size=(n, cols)), requires_grad=True)
        L1 = ad.Tensor(rng.normal(size=(n, cols)), requires_grad=True)
        L2 = ad.Tensor(rng.normal(size=(m, cols)), requires_grad=True)
        b1 = ad.Parameter(np.array(0.9), "b1")
        b2 = ad.Parameter(np.array(1.2), "b2")
        weight = rng.normal(size=(n, cols))

        def loss():
            st = NetState(X=X, Z=Z, L1=L1, L2=L2)
            out = net_x_update(st, A, B, 0.07, b1, b2)
            return ad.sum_all(ad.mul(out, weight))

        from tests.test_autodiff import check_gradients

        check_gradients(loss, [X, Z, L1, L2, b1, b2], rtol=1e-5, atol=1e-8)


class TestSsa:
    def test_zero_input_zero_output(self, net16):
        U = ad.Tensor(np.zeros((2, 4, 16, 16)))
        out = ssa_forward(U, net16, "train")
        assert np.abs(out.data).max() == 0.0

    def test_attention_rows_sum_to_one(self, net16):
        rng = np.random.default_rng(7)
        U = ad.Tensor(rng.normal(size=(1, 4, 16, 16)))
        # recompute the attention map the same way the module does
        p = net16.params
        e0 = ad.conv2d(U, p["ssa.enc0.w"], p["ssa.enc0.b"], padding=1)
        e1 = ad.elu(
            ad.batchnorm2d(
                ad.conv2d(e0, p["ssa.enc1.w"], p["ssa.enc1.b"], stride=2),
                p["ssa.bn1.scale"],
                p["ssa.bn1.shift"],
                p["ssa.bn1.running_mean"],
                p["ssa.bn1.running_var"],
                "eval",
            )
        )
        e2 = ad.elu(
            ad.batchnorm2d(
                ad.conv2d(e1, p["ssa.enc2.w"], p["ssa.enc2.b"], stride=2),
                p["ssa.bn2.scale"],
                p["ssa.bn2.shift"],
                p["ssa.bn2.running_mean"],
                p["ssa.bn2.running_var"],
                "eval",
            )
        )
        P = 16
        q = ad.reshape(ad.conv2d(e2, p["ssa.q.w"], p["ssa.q.b"], padding=1), (1, 16, P))
        k = ad.reshape(ad.conv2d(e2, p["ssa.k.w"], p["ssa.k.b"], padding=1), (1, 16, P))
        S = ad.softmax_rows(ad.bmm(ad.transpose_last(k), q))
        assert np.allclose(S.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_output_shape_and_mask(self, net16, grid16):
        rng = np.random.default_rng(8)
        U = ad.Tensor(rng.normal(size=(2, 4, 16, 16)))
        out = ssa_forward(U, net16, "train")
        assert out.data.shape == (2, 4, 16, 16)
        assert np.all(out.data[:, :, ~grid16.mask] == 0.0)

    def test_encoder_shift_covariance(self, net16):
        # shifting the input by one encoder cell (4 pixels) shifts the encoder
        # output by one cell in the interior
        rng = np.random.default_rng(9)
        U = rng.normal(size=(1, 4, 16, 16))
        shifted = np.roll(U, shift=4, axis=3)
        p = net16.params

        def encode(x):
            e0 = ad.conv2d(ad.Tensor(x), p["ssa.enc0.w"], p["ssa.enc0.b"], padding=1)
            e1 = ad.elu(
                ad.batchnorm2d(
                    ad.conv2d(e0, p["ssa.enc1.w"], p["ssa.enc1.b"], stride=2),
                    p["ssa.bn1.scale"],
                    p["ssa.bn1.shift"],
                    p["ssa.bn1.running_mean"],
                    p["ssa.bn1.running_var"],
                    "eval",
                )
            )
            return ad.elu(
                ad.batchnorm2d(
                    ad.conv2d(e1, p["ssa.enc2.w"], p["ssa.enc2.b"], stride=2),
                    p["ssa.bn2.scale"],
                    p["ssa.bn2.shift"],
                    p["ssa.bn2.running_mean"],
                    p["ssa.bn2.running_var"],
                    "eval",
                )
            ).data

        a = encode(U)
        b = encode(shifted)
        # interior cells: skip the wrap-around column
        assert np.allclose(a[:, :, 1:-1, 1:-2], np.roll(b, -1, axis=3)[:, :, 1:-1, 1:-2], atol=1e-10)

    def test_rejects_indivisible_grid(self):
        grid = fem.build_pixel_grid(18, 18)
        with pytest.raises(ValueError):
            MmvNetParams(grid, l=4)


class TestConvLstm:
    def test_zero_input_zero_output(self, net16):
        out = convlstm_forward(ad.Tensor(np.zeros((2, 4, 16, 16))), net16)
        assert np.abs(out.data).max() == 0.0

    def test_output_nonnegative(self, net16):
        rng = np.random.default_rng(10)
        out = convlstm_forward(ad.Tensor(rng.normal(size=(2, 4, 16, 16))), net16)
        assert out.data.min() >= 0.0

    def test_gradient_paths(self, grid16):
        # small dedicated net so finite differences stay cheap
        grid8 = fem.build_pixel_grid(8, 8)
        net = MmvNetParams(grid8, l=2, C=4, G=2, seed=11)
        rng = np.random.default_rng(12)
        R = ad.Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
        weight = rng.normal(size=(1, 2, 8, 8))
        leaves = [R, net["lstm.l1.w"], net["lstm.l1.b"], net["lstm.l2.w"],
                  net["lstm.head.w"], net["lstm.head.b"]]

        def loss():
            return ad.sum_all(ad.mul(convlstm_forward(R, net), weight))

        from tests.test_autodiff import check_gradients

        check_gradients(loss, leaves, eps=1e-6, rtol=1e-4, atol=1e-8, max_entries=6)


class TestZUpdate:
    def test_ablating_multiplier_input(self, net16, grid16):
        rng = np.random.default_rng(13)
        net16["a2"].data = np.array(0.0)
        try:
            X = ad.Tensor(rng.normal(size=(grid16.n, 4)))
            Z = ad.Tensor(np.zeros((grid16.n, 4)))
            L2 = ad.Tensor(np.zeros((24, 4)))
            s1 = NetState(X=X, Z=Z, L1=ad.Tensor(rng.normal(size=(grid16.n, 4))), L2=L2)
            s2 = NetState(X=X, Z=Z, L1=ad.Tensor(rng.normal(size=(grid16.n, 4))), L2=L2)
            z1 = net_z_update(s1, net16, "eval", 1)
            z2 = net_z_update(s2, net16, "eval", 1)
            assert np.array_equal(z1.data, z2.data)
        finally:
            net16["a2"].data = np.array(1.0)

    def test_zero_state_zero_output(self, net16, grid16):
        s = NetState(
            X=ad.Tensor(np.zeros((grid16.n, 4))),
            Z=ad.Tensor(np.zeros((grid16.n, 4))),
            L1=ad.Tensor(np.zeros((grid16.n, 4))),
            L2=ad.Tensor(np.zeros((24, 4))),
        )
        z = net_z_update(s, net16, "eval", 1)
        assert np.abs(z.data).max() == 0.0

    def test_shape_contract(self, net16, grid16):
        rng = np.random.default_rng(14)
        s = make_state(rng, 24, grid16.n, 8)
        for arch in ("both", "ssa_only", "lstm_only", "identity"):
            z = net_z_update(s, net16, "eval", 2, arch=arch)
            assert z.data.shape == (grid16.n, 8)


class TestMultiplierUpdates:
    def test_fixed_point(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(15)
        X = rng.normal(size=(grid16.n, 8))
        st = NetState(
            X=ad.Tensor(X),
            Z=ad.Tensor(X.copy()),
            L1=ad.Tensor(rng.normal(size=(grid16.n, 8))),
            L2=ad.Tensor(rng.normal(size=(A.shape[0], 8))),
        )
        L1, L2 = net_multiplier_updates(st, A, A @ X, 1.0, 1.0)
        assert np.array_equal(L1.data, st.L1.data)
        assert np.abs(L2.data - st.L2.data).max() < 1e-12

    def test_frozen_when_coefficient_vanishes(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(16)
        st = make_state(rng, A.shape[0], grid16.n, 8)
        L1, _ = net_multiplier_updates(st, A, B, 0.0, 1.0)
        assert np.array_equal(L1.data, st.L1.data)

    def test_bitwise_match_with_classical(self, small_problem, grid16):
        A, B = small_problem
        rng = np.random.default_rng(17)
        st = make_state(rng, A.shape[0], grid16.n, 8)
        gamma1, beta1, gamma2, beta2 = 0.7, 0.8, 1.1, 0.9
        L1, L2 = net_multiplier_updates(
            st, A, B, gamma1 * beta1, gamma2 * beta2
        )
        cl1, cl2 = admm.multiplier_updates(
            admm.AdmmState(st.X.data, st.Z.data, st.L1.data, st.L2.data),
            admm.LinearizedModel(A, B),
            admm.AdmmParams(beta1=beta1, beta2=beta2, gamma1=gamma1, gamma2=gamma2),
        )
        assert np.array_equal(L1.data, cl1)
        assert np.array_equal(L2.data, cl2)


class TestNetForward:
    def test_zero_data_zero_output(self, net16, small_problem, grid16):
        A, _ = small_problem
        laplace = admm.laplacian(grid16)
        B = np.zeros((A.shape[0], 4))
        z = net_forward(B, A, laplace, net16, K_s=2, mode="eval")
        assert np.abs(z.data).max() == 0.0

    def test_zero_depth_returns_initial_z(self, net16, small_problem, grid16):
        A, B = small_problem
        laplace = admm.laplacian(grid16)
        z = net_forward(B, A, laplace, net16, K_s=0, mode="eval")
        assert np.abs(z.data).max() == 0.0

    def test_collect_intermediates(self, net16, small_problem, grid16):
        A, B = small_problem
        laplace = admm.laplacian(grid16)
        z, inter = net_forward(B, A, laplace, net16, K_s=3, mode="eval", collect=True)
        assert len(inter) == 3
        assert np.array_equal(inter[-1], z.data)

    def test_identity_block_reproduces_classical_iteration(
        self, small_problem, grid16
    ):
        # pinned scalars + identity Z path: X, Z, and both multipliers match
        # one classical iteration bitwise
        A, B = small_problem
        net = MmvNetParams(grid16, l=4, seed=19)
        beta1, beta2, eta, gamma1, gamma2 = 0.8, 1.3, 0.05, 0.9, 1.1
        net["a1"].data = np.array(1.0)
        net["a2"].data = np.array(1.0 / beta1)
        rng = np.random.default_rng(20)
        st = make_state(rng, A.shape[0], grid16.n, 8)

        scalars = {
            "eta": eta,
            "beta1": beta1,
            "beta2": beta2,
            "c1": gamma1 * beta1,
            "c2": gamma2 * beta2,
        }
        X1 = net_x_update(st, A, B, scalars["eta"], scalars["beta1"], scalars["beta2"])
        st_after_x = NetState(X=X1, Z=st.Z, L1=st.L1, L2=st.L2)
        Z1 = net_z_update(st_after_x, net, "eval", 2, arch="identity")
        st_after_z = NetState(X=X1, Z=Z1, L1=st.L1, L2=st.L2)
        L1n, L2n = net_multiplier_updates(st_after_z, A, B, scalars["c1"], scalars["c2"])

        params = admm.AdmmParams(
            beta1=beta1, beta2=beta2, gamma1=gamma1, gamma2=gamma2, eta=eta
        )
        model = admm.LinearizedModel(A, B)
        cstate = admm.AdmmState(
            st.X.data.copy(), st.Z.data.copy(), st.L1.data.copy(), st.L2.data.copy()
        )
        cstate.X = admm.x_update_gd(cstate, model, params)
        cstate.Z = net["a1"].data * cstate.X + net["a2"].data * cstate.L1
        cL1, cL2 = admm.multiplier_updates(cstate, model, params)

        assert np.array_equal(X1.data, cstate.X)
        assert np.array_equal(Z1.data, cstate.Z)
        assert np.array_equal(L1n.data, cL1)
        assert np.array_equal(L2n.data, cL2)

    def test_reconstruct_masks_and_signs(self, net16, small_problem, grid16):
        A, B = small_problem
        laplace = admm.laplacian(grid16)
        pred = reconstruct(B, A, laplace, net16, K_s=2)
        assert pred.shape == (grid16.n, 8)
        # ReLU head means network-domain output is nonnegative, so data-domain
        # predictions are nonpositive
        assert pred.max() <= 0.0


class TestParams:
    def test_parameter_budget(self, net16):
        assert net16.trainable_count() < 20_000

    def test_single_shared_copy_in_checkpoint(self, net16, tmp_path):
        path = tmp_path / "net.ckpt"
        ad.save_checkpoint(path, net16.state_dict())
        loaded = ad.load_checkpoint(path)
        assert len(loaded) == len(net16.params)
        fresh = MmvNetParams(net16.grid, l=4, seed=99)
        fresh.load_state_dict(loaded)
        for name in net16.params:
            assert np.allclose(
                fresh[name].data, net16[name].data.astype(np.float32), atol=0
            )

    def test_missing_parameter_rejected(self, net16):
        with pytest.raises(KeyError):
            net16.load_state_dict({})


@pytest.fixture(scope="module")
def tiny_dataset():
    config = dsmod.DatasetConfig(
        n_train=6, n_val=2, n_test=2, grid_h=16, grid_w=16, jacobian_level=1
    )
    ctx = dsmod.build_sim_context(config)
    return dsmod.generate_dataset(config, seed=21, ctx=ctx)


class TestTraining:
    def test_stage_a_deterministic(self, tiny_dataset):
        config = TrainConfig(epochs_a=2, epochs_b=0, epochs_c=0, K_s=1, seed=5)
        _, logs1 = train(tiny_dataset, config, stages="a")
        _, logs2 = train(tiny_dataset, config, stages="a")
        assert [e["train_loss"] for e in logs1] == [e["train_loss"] for e in logs2]

    def test_three_architectures_distinct(self, tiny_dataset):
        preds = {}
        for arch in ("ssa_only", "lstm_only", "both"):
            config = TrainConfig(
                epochs_a=1, epochs_b=1, epochs_c=0, K_s=1, seed=7, arch=arch
            )
            net, _ = train(tiny_dataset, config, stages="ab")
            A = tiny_dataset.smat.entries
            laplace = admm.laplacian(tiny_dataset.grid)
            preds[arch] = reconstruct(
                tiny_dataset.test[0].B, A, laplace, net, K_s=1
            )
        assert not np.allclose(preds["ssa_only"], preds["lstm_only"])
        assert not np.allclose(preds["ssa_only"], preds["both"])

    def test_full_pipeline_reduces_loss(self, tiny_dataset):
        config = TrainConfig(
            epochs_a=8, epochs_b=4, epochs_c=4, K_s=2, seed=1, lr=3e-3
        )
        net, logs = train(tiny_dataset, config)
        stage_a = [e for e in logs if e["stage"] == "A"]
        assert stage_a[-1]["train_loss"] < stage_a[0]["train_loss"]
        stage_c = [e for e in logs if e["stage"] == "C"]
        assert len(stage_c) == 4
        assert all(np.isfinite(e["val_rmse"]) for e in logs)
