"""Unrolled MMV reconstruction network.

Each of the K_s shared-parameter blocks mirrors one classical iteration:
a gradient-descent X update with learned positive scalars, a Z update that
replaces row shrinkage with an attention encoder/decoder followed by a
convolutional LSTM over the frequency sequence, and learned multiplier
steps.  The network operates on negated data so the ReLU head can represent
the (nonnegative) conductivity-drop targets; callers negate back.

Batching convention: vector-domain tensors are (n, N*l) with columns ordered
sample-major, so column s*l + f is sample s at frequency f.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from mfeit import admm
from mfeit import autodiff as ad
from mfeit.errors import NumericalError

DEFAULT_ATTENTION_CHANNELS = 16  # C
DEFAULT_LSTM_CHANNELS = 8       # G

ARCHITECTURES = ("both", "ssa_only", "lstm_only", "identity")


def sign_convention(x, direction="to_net"):
    """Involution between data domain and network domain (plain negation)."""
    if direction not in ("to_net", "from_net"):
        raise ValueError(f"unknown sign direction {direction!r}")
    if isinstance(x, ad.Tensor):
        return ad.neg(x)
    return -np.asarray(x)


def _glorot(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    fan_out = shape[0] if len(shape) > 1 else shape[0]
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


class MmvNetParams:
    """One shared copy of every learned quantity, keyed by name.

    Scalars eta/beta1/beta2/c1/c2 are stored raw and consumed through
    softplus so the effective values stay positive; a1/a2 (the learned
    combination of X and the first multiplier) are unconstrained.
    """

    def __init__(self, grid, l=4, C=DEFAULT_ATTENTION_CHANNELS,
                 G=DEFAULT_LSTM_CHANNELS, seed=0, eta0=0.1, arch="both"):
        if grid.H % 4 or grid.W % 4:
            raise ValueError("grid sides must be divisible by 4 for the encoder")
        if C % 2:
            raise ValueError("attention channel count must be even")
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.grid = grid
        self.l = l
        self.C = C
        self.G = G
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng(seed)
        p = {}

        def param(name, value, trainable=True):
            p[name] = ad.Parameter(np.asarray(value, dtype=float), name, trainable)

        def conv(name, o, c, k):
            param(f"{name}.w", _glorot(rng, (o, c, k, k)))
            param(f"{name}.b", np.zeros(o))

        def deconv(name, ci, co, k):
            param(f"{name}.w", _glorot(rng, (ci, co, k, k)))
            param(f"{name}.b", np.zeros(co))

        def bn(name, c):
            param(f"{name}.scale", np.ones(c))
            param(f"{name}.shift", np.zeros(c))
            param(f"{name}.running_mean", np.zeros(c), trainable=False)
            param(f"{name}.running_var", np.ones(c), trainable=False)

        param("eta_raw", ad.softplus_inverse(eta0))
        param("beta1_raw", ad.softplus_inverse(1.0))
        param("beta2_raw", ad.softplus_inverse(1.0))
        param("c1_raw", ad.softplus_inverse(1.0))
        param("c2_raw", ad.softplus_inverse(1.0))
        param("a1", 1.0)
        param("a2", 1.0)

        conv("ssa.enc0", 1, l, 3)
        conv("ssa.enc1", C // 2, 1, 2)
        bn("ssa.bn1", C // 2)
        conv("ssa.enc2", C, C // 2, 2)
        bn("ssa.bn2", C)
        conv("ssa.q", C, C, 3)
        conv("ssa.k", C, C, 3)
        conv("ssa.v", C, C, 3)
        deconv("ssa.dec1", C, C // 2, 2)
        bn("ssa.bn3", C // 2)
        deconv("ssa.dec2", C // 2, l, 2)
        bn("ssa.bn4", l)

        # gate convolutions see [input, hidden]; forget-gate bias starts at 1
        param("lstm.l1.w", _glorot(rng, (4 * G, 1 + G, 3, 3)))
        b1 = np.zeros(4 * G)
        b1[G : 2 * G] = 1.0
        param("lstm.l1.b", b1)
        param("lstm.l2.w", _glorot(rng, (4 * G, 2 * G, 3, 3)))
        b2 = np.zeros(4 * G)
        b2[G : 2 * G] = 1.0
        param("lstm.l2.b", b2)
        conv("lstm.head", 1, G, 1)

        self.params = p
        self._mask = grid.mask.astype(float)

    def __getitem__(self, name):
        return self.params[name]

    def all_parameters(self):
        return list(self.params.values())

    def z_parameters(self):
        """Stage-A subset: the Z-update path only."""
        return [
            t
            for name, t in self.params.items()
            if name.startswith(("ssa.", "lstm.")) or name in ("a1", "a2")
        ]

    def trainable_count(self):
        return int(
            sum(t.data.size for t in self.params.values() if t.trainable)
        )

    def effective_scalars(self):
        """Softplus-mapped scalar tensors used by the update steps."""
        return {
            "eta": ad.softplus(self["eta_raw"]),
            "beta1": ad.softplus(self["beta1_raw"]),
            "beta2": ad.softplus(self["beta2_raw"]),
            "c1": ad.softplus(self["c1_raw"]),
            "c2": ad.softplus(self["c2_raw"]),
        }

    def snapshot(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snap):
        for name, t in self.params.items():
            t.data = snap[name].copy()

    def state_dict(self):
        return dict(self.params)

    def load_state_dict(self, arrays):
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape {arrays[name].shape} for {name!r}, "
                    f"expected {t.data.shape}"
                )
            t.data = arrays[name].astype(float).copy()


@dataclass
class NetState:
    X: ad.Tensor
    Z: ad.Tensor
    L1: ad.Tensor
    L2: ad.Tensor
    k: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 6
    lr: float = 1e-3
    epochs_a: int = 50
    epochs_b: int = 30
    epochs_c: int = 100
    K_s: int = 5
    C: int = DEFAULT_ATTENTION_CHANNELS
    G: int = DEFAULT_LSTM_CHANNELS
    arch: str = "both"
    seed: int = 0
    gn_lambda: float = None

    def __post_init__(self):
        if self.K_s < 1:
            raise ValueError("K_s must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.arch not in ("both", "ssa_only", "lstm_only"):
            raise ValueError(f"unknown training architecture {self.arch!r}")


# ---------------------------------------------------------------------------
# vector <-> grid plumbing


def grid_embed(x, grid, n_samples, l):
    """(n, N*l) vector tensor -> (N, l, H, W) grid tensor, zero off mask."""
    flat = ad.scatter_rows(x, grid.flat_index, grid.H * grid.W)
    return ad.reshape(ad.transpose_last(flat), (n_samples, l, grid.H, grid.W))


def grid_extract(g, grid, n_samples, l):
    flat = ad.reshape(g, (n_samples * l, grid.H * grid.W))
    return ad.gather_rows(ad.transpose_last(flat), grid.flat_index)


def embed_to_grid(x, grid):
    """Single-sample contract: (n, l) -> (l, H, W)."""
    x = ad.as_tensor(x)
    n, l = x.data.shape
    out = grid_embed(x, grid, 1, l)
    return ad.reshape(out, (l, grid.H, grid.W))


def extract_from_grid(g, grid):
    g = ad.as_tensor(g)
    l = g.data.shape[0]
    return grid_extract(ad.reshape(g, (1, l, grid.H, grid.W)), grid, 1, l)


# ---------------------------------------------------------------------------
# update steps


def net_x_update(state, A, B, eta, beta1, beta2):
    """Gradient-descent X step as one fused op; the forward arithmetic is the
    classical update itself, so pinned scalars reproduce it bitwise."""
    X, Z, L1, L2 = state.X, state.Z, state.L1, state.L2
    eta_t, b1_t, b2_t = (ad.as_tensor(s) for s in (eta, beta1, beta2))
    eta_v = float(eta_t.data)
    b1_v = float(b1_t.data)
    b2_v = float(b2_t.data)

    classical_params = admm.AdmmParams(beta1=b1_v, beta2=b2_v, eta=eta_v)
    classical_state = admm.AdmmState(X.data, Z.data, L1.data, L2.data)
    model = admm.LinearizedModel(A, B)
    G = admm.admm_gradient(classical_state, model, classical_params)
    out = X.data - eta_v * G

    def back_x(g):
        return g - eta_v * (b1_v * g + b2_v * (A.T @ (A @ g)))

    vjps = [
        (X, back_x),
        (Z, lambda g: (eta_v * b1_v) * g),
        (L1, lambda g: -eta_v * g),
        (L2, lambda g: eta_v * (A @ g)),
        (eta_t, lambda g: np.array(-(G * g).sum())),
        (b1_t, lambda g: np.array(-eta_v * ((X.data - Z.data) * g).sum())),
        (b2_t, lambda g: np.array(-eta_v * ((A @ X.data - B) * (A @ g)).sum())),
    ]
    return ad.make_op(out, vjps)


def ssa_forward(U, net, mode):
    """Attention encoder/decoder over one grid tensor (N, l, H, W)."""
    N, l, H, W = U.data.shape
    if H % 4 or W % 4:
        raise ValueError(f"grid {H}x{W} not divisible by 4")
    p = net.params

    def bn(name, t):
        return ad.batchnorm2d(
            t,
            p[f"{name}.scale"],
            p[f"{name}.shift"],
            p[f"{name}.running_mean"],
            p[f"{name}.running_var"],
            mode,
        )

    e0 = ad.conv2d(U, p["ssa.enc0.w"], p["ssa.enc0.b"], stride=1, padding=1)
    e1 = ad.elu(bn("ssa.bn1", ad.conv2d(e0, p["ssa.enc1.w"], p["ssa.enc1.b"], stride=2)))
    e2 = ad.elu(bn("ssa.bn2", ad.conv2d(e1, p["ssa.enc2.w"], p["ssa.enc2.b"], stride=2)))

    C = net.C
    P = (H // 4) * (W // 4)
    q = ad.reshape(ad.conv2d(e2, p["ssa.q.w"], p["ssa.q.b"], padding=1), (N, C, P))
    k = ad.reshape(ad.conv2d(e2, p["ssa.k.w"], p["ssa.k.b"], padding=1), (N, C, P))
    v = ad.reshape(ad.conv2d(e2, p["ssa.v.w"], p["ssa.v.b"], padding=1), (N, C, P))
    scores = ad.bmm(ad.transpose_last(k), q)  # (N, P, P), no scaling factor
    S = ad.softmax_rows(scores)
    o = ad.reshape(ad.bmm(v, S), (N, C, H // 4, W // 4))
    res = ad.add(e2, o)

    d1 = ad.elu(
        bn("ssa.bn3", ad.conv_transpose2d(res, p["ssa.dec1.w"], p["ssa.dec1.b"], stride=2))
    )
    d2 = ad.elu(
        bn("ssa.bn4", ad.conv_transpose2d(d1, p["ssa.dec2.w"], p["ssa.dec2.b"], stride=2))
    )
    return ad.mul(d2, net._mask)


def _convlstm_layer(frames, w, b, G):
    """Run one ConvLSTM layer over a list of (N, Cin, H, W) frames."""
    N, _, H, W = frames[0].data.shape
    h = ad.Tensor(np.zeros((N, G, H, W)))
    c = ad.Tensor(np.zeros((N, G, H, W)))
    outputs = []
    for x in frames:
        stacked = ad.concat([x, h], axis=1)
        gates = ad.conv2d(stacked, w, b, stride=1, padding=1)
        i = ad.sigmoid(ad.narrow(gates, 1, 0, G))
        f = ad.sigmoid(ad.narrow(gates, 1, G, G))
        o = ad.sigmoid(ad.narrow(gates, 1, 2 * G, G))
        g = ad.tanh(ad.narrow(gates, 1, 3 * G, G))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outputs.append(h)
    return outputs


def convlstm_forward(R, net):
    """Two stacked ConvLSTM layers over the frequency sequence, then a 1x1
    conv + ReLU head per step; channels are frames in ascending frequency."""
    N, l, H, W = R.data.shape
    p = net.params
    G = net.G
    frames = [ad.narrow(R, 1, f, 1) for f in range(l)]
    h1 = _convlstm_layer(frames, p["lstm.l1.w"], p["lstm.l1.b"], G)
    h2 = _convlstm_layer(h1, p["lstm.l2.w"], p["lstm.l2.b"], G)
    outs = [
        ad.relu(ad.conv2d(h, p["lstm.head.w"], p["lstm.head.b"]))
        for h in h2
    ]
    return ad.mul(ad.concat(outs, axis=1), net._mask)


def net_z_update(state, net, mode, n_samples, arch=None):
    """Z update: learned combination of X and the first multiplier, pushed
    through the grid-domain modules and gathered back."""
    arch = net.arch if arch is None else arch
    U = ad.add(ad.mul(net["a1"], state.X), ad.mul(net["a2"], state.L1))
    if arch == "identity":
        return U
    g = grid_embed(U, net.grid, n_samples, net.l)
    if arch in ("both", "ssa_only"):
        g = ssa_forward(g, net, mode)
    if arch in ("both", "lstm_only"):
        g = convlstm_forward(g, net)
    return grid_extract(g, net.grid, n_samples, net.l)


def net_multiplier_updates(state, A, B, c1, c2):
    """Learned multiplier ascent; sums with the previous multiplier (the
    standard form), with learned coefficients standing in for gamma*beta."""
    L1 = ad.add(state.L1, ad.mul(ad.as_tensor(c1), ad.sub(state.X, state.Z)))
    AX = ad.matmul(ad.Tensor(A), state.X)
    L2 = ad.add(state.L2, ad.mul(ad.as_tensor(c2), ad.sub(ad.Tensor(B), AX)))
    return L1, L2


def net_forward(
    B,
    A,
    laplace,
    net,
    K_s,
    mode="eval",
    n_samples=None,
    X0=None,
    gn_lambda=None,
    collect=False,
    scalars=None,
    arch=None,
):
    """Unroll K_s blocks from the Gauss-Newton initialization.

    B is already in the network (negated) domain, shape (m, N*l).  Returns
    the final Z tensor, plus every intermediate Z when `collect` is set.
    """
    l = net.l
    total_cols = B.shape[1]
    if n_samples is None:
        if total_cols % l:
            raise ValueError(f"{total_cols} columns not a multiple of l={l}")
        n_samples = total_cols // l
    if X0 is None:
        lam = gn_lambda if gn_lambda is not None else admm.default_gn_lambda(A, laplace)
        X0 = admm.gn_init(A, B, lam, laplace)
    n = A.shape[1]
    state = NetState(
        X=ad.as_tensor(X0),
        Z=ad.Tensor(np.zeros((n, total_cols))),
        L1=ad.Tensor(np.zeros((n, total_cols))),
        L2=ad.Tensor(np.zeros((A.shape[0], total_cols))),
    )
    if scalars is None:
        scalars = net.effective_scalars()
    intermediates = []
    for k in range(1, K_s + 1):
        state.X = net_x_update(
            state, A, B, scalars["eta"], scalars["beta1"], scalars["beta2"]
        )
        state.Z = net_z_update(state, net, mode, n_samples, arch=arch)
        state.L1, state.L2 = net_multiplier_updates(
            state, A, B, scalars["c1"], scalars["c2"]
        )
        state.k = k
        if collect:
            intermediates.append(state.Z.data.copy())
    if collect:
        return state.Z, intermediates
    return state.Z


def reconstruct(B_data, A, laplace, net, K_s, gn_lambda=None, collect=False):
    """Data-domain inference: negates in, unrolls frozen params, negates out."""
    B_net = sign_convention(np.asarray(B_data, dtype=float), "to_net")
    out = net_forward(
        B_net, A, laplace, net, K_s, mode="eval", gn_lambda=gn_lambda, collect=collect
    )
    if collect:
        z, inter = out
        return sign_convention(z.data, "from_net"), [
            sign_convention(i, "from_net") for i in inter
        ]
    return sign_convention(out.data, "from_net")


# ---------------------------------------------------------------------------
# training


def _stack_columns(samples, attr):
    return np.concatenate([getattr(s, attr) for s in samples], axis=1)


def _batch_columns(indices, l):
    cols = []
    for s in indices:
        cols.extend(range(s * l, (s + 1) * l))
    return np.asarray(cols, dtype=np.int64)


def _epoch(
    net,
    optimizer,
    trainables,
    X0_all,
    B_all,
    T_all,
    order,
    batch_size,
    l,
    forward_fn,
):
    total = 0.0
    n_seen = 0
    n_batches = (len(order) + batch_size - 1) // batch_size
    for bi in range(n_batches):
        idx = order[bi * batch_size : (bi + 1) * batch_size]
        cols = _batch_columns(idx, l)
        tape = ad.Tape()
        with tape:
            pred = forward_fn(X0_all[:, cols], B_all[:, cols], len(idx))
            loss = ad.mse_loss(
                pred, ad.Tensor(T_all[:, cols]), n_samples=len(idx)
            )
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss in batch {bi}")
        ad.backward(tape, loss)
        ad.adam_step(trainables, optimizer)
        total += value * len(idx)
        n_seen += len(idx)
    return total / n_seen


def _eval_loss_rmse(net, X0_all, B_all, T_all, n_samples, l, forward_fn):
    pred = forward_fn(X0_all, B_all, n_samples)
    diff = pred.data - T_all
    loss = float((diff * diff).sum() / n_samples)
    rmse = float(np.sqrt(np.mean(diff * diff)))
    return loss, rmse


def train(dataset, config, net=None, stages="abc", log=None, callback=None):
    """Three-stage training: the Z path alone as a one-shot denoiser, then
    the full unroll at K_s=1, then at the target depth.  Returns the params
    (best validation checkpoint of each stage carried forward) and a log of
    per-epoch losses.  An optional callback sees each log entry and may end
    the current stage early by returning True."""
    A = dataset.smat.entries
    grid = dataset.grid
    l = dataset.groups.l
    laplace = admm.laplacian(grid)
    lam = config.gn_lambda if config.gn_lambda is not None else admm.default_gn_lambda(
        A, laplace
    )
    if net is None:
        net = MmvNetParams(
            grid,
            l=l,
            C=config.C,
            G=config.G,
            seed=config.seed,
            eta0=admm.default_eta(A),
            arch=config.arch,
        )
    rng = np.random.default_rng(config.seed)
    logs = [] if log is None else log

    def prepare(split):
        B_net = sign_convention(_stack_columns(split, "B"), "to_net")
        T_net = sign_convention(_stack_columns(split, "X_gt"), "to_net")
        X0 = admm.gn_init(A, B_net, lam, laplace)
        return X0, B_net, T_net

    X0_tr, B_tr, T_tr = prepare(dataset.train)
    X0_va, B_va, T_va = prepare(dataset.val)
    n_train = len(dataset.train)
    n_val = len(dataset.val)

    def z_only_forward(mode):
        def fn(x0, b, k):
            state = NetState(
                X=ad.as_tensor(x0),
                Z=ad.Tensor(np.zeros_like(x0)),
                L1=ad.Tensor(np.zeros_like(x0)),
                L2=ad.Tensor(np.zeros((A.shape[0], x0.shape[1]))),
            )
            return net_z_update(state, net, mode, k)

        return fn

    def unrolled_forward(K, mode):
        def fn(x0, b, k):
            return net_forward(
                b, A, laplace, net, K, mode=mode, n_samples=k, X0=x0
            )

        return fn

    stage_plan = []
    if "a" in stages:
        stage_plan.append(
            ("A", config.epochs_a, net.z_parameters(), z_only_forward)
        )
    if "b" in stages:
        stage_plan.append(
            ("B", config.epochs_b, net.all_parameters(), lambda mode: unrolled_forward(1, mode))
        )
    if "c" in stages:
        stage_plan.append(
            ("C", config.epochs_c, net.all_parameters(), lambda mode: unrolled_forward(config.K_s, mode))
        )

    for stage, epochs, trainables, make_forward in stage_plan:
        optimizer = ad.AdamState(lr=config.lr)
        best = (np.inf, net.snapshot())
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n_train)
            try:
                train_loss = _epoch(
                    net,
                    optimizer,
                    trainables,
                    X0_tr,
                    B_tr,
                    T_tr,
                    order,
                    config.batch_size,
                    l,
                    make_forward("train"),
                )
            except NumericalError as exc:
                raise NumericalError(f"stage {stage} epoch {epoch}: {exc}") from exc
            val_loss, val_rmse = _eval_loss_rmse(
                net, X0_va, B_va, T_va, n_val, l, make_forward("eval")
            )
            entry = {
                "stage": stage,
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_rmse": val_rmse,
            }
            logs.append(entry)
            if val_loss < best[0]:
                best = (val_loss, net.snapshot())
            if callback is not None and callback(entry):
                break
        net.restore(best[1])
    return net, logs
