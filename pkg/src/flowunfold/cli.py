"""Command-line surface: synthetic data, config files, image and checkpoint
formats, training/evaluation commands, and a self-test harness.

File formats are deliberately minimal and bit-exact:

* images: binary PGM (P5, grayscale) / PPM (P6, color), 8-bit, maxval 255;
  pixel v loads as v/255 - 0.5, saving rounds 255(x + 0.5) clamped to [0, 255];
* checkpoints: magic "UNFW", u32 version, u64 entry count, then per entry
  u32 name length + UTF-8 name, u32 rank, u64 dims, f64 values, all
  little-endian;
* configs: `key = value` lines with `#` comments; unknown keys are errors,
  and every command echoes its fully resolved config as `resolved.cfg`.
"""

from __future__ import annotations

import argparse
import math
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diff import ParamStore, grad_check
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FlowUnfoldError,
)
from .flow import FlowModel, flow_forward
from .numerics import Prng, derive_seed
from .operators import TASKS, Identity, make_measurement, operator_for_task
from .train import (
    AdamState,
    TrainConfig,
    adam_update,
    psnr,
    pretrain,
    train_unrolled,
)
from .unfold import UnrolledNet, initial_guess, prox_shrink, reconstruct

__all__ = [
    "ImageSet",
    "load_image",
    "save_image",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "restore_into",
    "parse_config",
    "resolve_config",
    "config_to_traincfg",
    "echo_config",
    "synth_blobs",
    "main",
]

# sub-seed stream tags (continuing the train-module numbering)
_TAG_BLOBS = 10
_TAG_MEASURE = 11
_TAG_EVAL = 12


# -- image files -----------------------------------------------------------------


def save_image(path, x: np.ndarray) -> None:
    """Write (1, H, W) as binary PGM or (3, H, W) as binary PPM."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise DataError(f"save_image needs (1|3, H, W), got {x.shape}")
    c, h, w = x.shape
    vals = np.clip(np.rint(255.0 * (x + 0.5)), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = vals[0].tobytes() if c == 1 else vals.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body)


def _read_header_tokens(data: bytes, count: int):
    """Read whitespace-separated header tokens, honoring '#' comments.
    Returns (tokens, offset of the byte after the final single whitespace)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataError("truncated image header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or not data[i : i + 1].isspace():
        raise DataError("image header not terminated by whitespace")
    return tokens, i + 1


def load_image(path) -> np.ndarray:
    """Read a binary PGM/PPM file into a (C, H, W) float array in [-0.5, 0.5]."""
    data = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise DataError(f"{path}: malformed image header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    raster = data[offset : offset + c * h * w]
    if len(raster) != c * h * w:
        raise DataError(f"{path}: raster truncated")
    flat = np.frombuffer(raster, dtype=np.uint8).astype(float)
    img = flat.reshape(h, w)[None] if c == 1 else flat.reshape(h, w, 3).transpose(2, 0, 1)
    return img / 255.0 - 0.5


# -- datasets --------------------------------------------------------------------


@dataclass
class ImageSet:
    """In-memory dataset: (N, C, H, W) arrays per split."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    ids: dict | None = None  # split name -> list of manifest indices


def _image_path(dirpath: Path, index: int, channels: int) -> Path:
    ext = "pgm" if channels == 1 else "ppm"
    return dirpath / f"{index:05d}.{ext}"


def load_dataset(dirpath) -> ImageSet:
    """Load a dataset directory.

    With manifest.txt (lines `index<TAB>split`), images load into the listed
    splits; without one, every image file becomes test data.
    """
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise DataError(f"dataset directory {dirpath} does not exist")
    manifest = dirpath / "manifest.txt"
    splits: dict[str, list] = {"train": [], "val": [], "test": []}
    ids: dict[str, list] = {"train": [], "val": [], "test": []}
    if manifest.exists():
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                idx_str, split = line.split("\t")
                idx = int(idx_str)
            except ValueError as exc:
                raise DataError(f"{manifest}:{lineno}: malformed line {line!r}") from exc
            if split not in splits:
                raise DataError(f"{manifest}:{lineno}: unknown split {split!r}")
            for channels in (1, 3):
                p = _image_path(dirpath, idx, channels)
                if p.exists():
                    splits[split].append(load_image(p))
                    ids[split].append(idx)
                    break
            else:
                raise DataError(f"{manifest}:{lineno}: no image file for index {idx}")
    else:
        files = sorted(list(dirpath.glob("*.pgm")) + list(dirpath.glob("*.ppm")))
        if not files:
            raise DataError(f"{dirpath} holds no .pgm/.ppm images")
        for i, p in enumerate(files):
            splits["test"].append(load_image(p))
            ids["test"].append(i)

    def stack(name):
        imgs = splits[name]
        if not imgs:
            return np.zeros((0, 0, 0, 0))
        shapes = {im.shape for im in imgs}
        if len(shapes) > 1:
            raise DataError(f"{name} split mixes image shapes: {sorted(shapes)}")
        return np.stack(imgs)

    return ImageSet(stack("train"), stack("val"), stack("test"), ids)


def synth_blobs(count: int, shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Sum of 2-3 random anisotropic Gaussian blobs per image, min-max
    rescaled to [-0.5, 0.5].  Deterministic in (seed, index)."""
    c, h, w = shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    side = min(h, w)
    out = np.zeros((count, c, h, w))
    for i in range(count):
        rng = Prng(derive_seed(seed, _TAG_BLOBS, i))
        img = np.zeros((c, h, w))
        for _ in range(2 + int(rng.uniform() * 2)):
            cy, cx = rng.uniform() * h, rng.uniform() * w
            sy = (0.1 + 0.3 * rng.uniform()) * side
            sx = (0.1 + 0.3 * rng.uniform()) * side
            theta = rng.uniform() * math.pi
            amp = 0.5 + 0.5 * rng.uniform()
            ct, st = math.cos(theta), math.sin(theta)
            u = ct * (rows - cy) + st * (cols - cx)
            v = -st * (rows - cy) + ct * (cols - cx)
            blob = np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2))
            for ch in range(c):
                img[ch] += amp * (0.5 + 0.5 * rng.uniform()) * blob if c > 1 else amp * blob
        lo, hi = img.min(), img.max()
        if hi > lo:
            out[i] = (img - lo) / (hi - lo) - 0.5
    return out


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 split sizes; remainders go to test."""
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"UNFW"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore) -> None:
    """Write every parameter, in store order, to the binary format above."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(store)))
        for p in store:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.value.ndim))
            for dim in p.value.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> array mapping."""
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {_CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<Q", data, 8)
    offset = 16
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            entries[name] = values.reshape(dims).astype(float)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return entries


def restore_into(store: ParamStore, entries: dict[str, np.ndarray], origin="checkpoint") -> None:
    """Copy loaded entries into a store; names and shapes must match exactly."""
    want = set(store.names())
    have = set(entries)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise CheckpointError(
            f"{origin} does not match the model: missing {missing[:4]}, unexpected {extra[:4]}"
        )
    for name, value in entries.items():
        p = store[name]
        if p.value.shape != value.shape:
            raise CheckpointError(
                f"{origin} entry {name}: shape {value.shape}, model expects {p.value.shape}"
            )
        p.value[...] = value


# -- configuration ---------------------------------------------------------------

# key -> (type, default); -1/0 sentinels resolve against task and image size
_CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "task": (str, "denoise"),
    "sigma_n": (float, -1.0),  # -1: task default (0.1 denoise, 0 otherwise)
    "mask_w": (int, 0),  # 0: ceil(0.3 min(H, W))
    "sigma_b": (float, 1.0),
    "blur_radius": (int, 0),  # 0: ceil(3 sigma_b)
    "K": (int, 3),
    "L": (int, 2),
    "D": (int, 4),
    "hidden": (int, 16),
    "lr": (float, 0.0),  # 0: 1e-4 when min(H, W) < 32, else 1e-5
    "scalar_lr": (float, 1e-2),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps_adam": (float, 1e-8),
    "batch_size": (int, 16),
    "max_epochs": (int, 30),
    "patience": (int, 5),
    "seed": (int, 0),
    "height": (int, 16),
    "width": (int, 16),
    "channels": (int, 1),
    "count": (int, 500),
}


def parse_config(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment; unknown keys error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    out: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        typ = _CONFIG_SCHEMA[key][0]
        try:
            out[key] = typ(value)
        except ValueError as exc:
            raise ConfigError(
                f"{path}:{lineno}: key {key!r} expects {typ.__name__}, got {value!r}"
            ) from exc
    return out


def resolve_config(overrides: dict, shape=None, task: str | None = None) -> dict:
    """Fill defaults and resolve sentinel values against the task and the
    image size (when known)."""
    cfg = {key: default for key, (_, default) in _CONFIG_SCHEMA.items()}
    for key, value in overrides.items():
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    if task is not None:
        cfg["task"] = task
    if shape is not None:
        cfg["channels"], cfg["height"], cfg["width"] = shape
    if cfg["sigma_n"] < 0:
        cfg["sigma_n"] = 0.1 if cfg["task"] == "denoise" else 0.0
    if cfg["lr"] == 0:
        cfg["lr"] = 1e-4 if min(cfg["height"], cfg["width"]) < 32 else 1e-5
    if cfg["mask_w"] == 0:
        cfg["mask_w"] = math.ceil(0.3 * min(cfg["height"], cfg["width"]))
    if cfg["blur_radius"] == 0:
        cfg["blur_radius"] = math.ceil(3 * cfg["sigma_b"])
    return cfg


def config_to_traincfg(cfg: dict) -> TrainConfig:
    return TrainConfig(
        task=cfg["task"],
        sigma_n=cfg["sigma_n"],
        mask_w=cfg["mask_w"],
        sigma_b=cfg["sigma_b"],
        blur_radius=cfg["blur_radius"],
        folds=cfg["K"],
        levels=cfg["L"],
        depth=cfg["D"],
        hidden=cfg["hidden"],
        lr=cfg["lr"],
        scalar_lr=cfg["scalar_lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps_adam=cfg["eps_adam"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=cfg["seed"],
    ).validate()


def echo_config(cfg: dict, dirpath) -> None:
    """Write the fully resolved config, replayable through parse_config."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {cfg[key]}" for key in _CONFIG_SCHEMA]
    (dirpath / "resolved.cfg").write_text("\n".join(lines) + "\n")


# -- shape/arch helpers ------------------------------------------------------------


def _build_flow(cfg: dict, shape) -> FlowModel:
    store = ParamStore()
    return FlowModel(shape, cfg["L"], cfg["D"], cfg["hidden"], store)


def _build_net(cfg: dict, shape) -> UnrolledNet:
    return UnrolledNet(shape, cfg["K"], cfg["L"], cfg["D"], cfg["hidden"])


def _operator(cfg: dict, shape):
    return operator_for_task(
        cfg["task"], shape, cfg["mask_w"], cfg["sigma_b"], cfg["blur_radius"]
    )


def _load_net(cfg: dict, shape, ckpt_path) -> UnrolledNet:
    net = _build_net(cfg, shape)
    try:
        restore_into(net.store, load_checkpoint(ckpt_path), origin=str(ckpt_path))
    except CheckpointError as exc:
        raise CheckpointError(
            f"{exc} (model built for image shape {tuple(shape)}; "
            f"check that the checkpoint was trained at this size)"
        ) from None
    for fold in net.folds:
        fold.flow.mark_initialized()
    return net


# -- commands ----------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    h, w = args.size
    shape = (args.channels, h, w)
    cfg = resolve_config(
        {"count": args.count, "height": h, "width": w, "channels": args.channels,
         "seed": args.seed}
    )
    images = synth_blobs(args.count, shape, args.seed)
    n_train, n_val, _ = split_counts(args.count)
    lines = []
    for i in range(args.count):
        save_image(_image_path(out, i, args.channels), images[i])
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        lines.append(f"{i}\t{split}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    echo_config(cfg, out)
    print(f"wrote {args.count} images to {out}")
    return 0


def _write_log(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines))


def cmd_pretrain(args) -> int:
    dataset = load_dataset(args.data)
    shape = dataset.train.shape[1:]
    cfg = resolve_config(parse_config(args.config), shape=shape)
    tcfg = config_to_traincfg(cfg)
    lines: list[str] = []
    flow = pretrain(dataset, tcfg, log=lines.append)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, flow.store)
    _write_log(str(out) + ".log", lines)
    echo_config(cfg, out.parent)
    print(f"pretrained prior saved to {out} ({len(lines)} epochs)")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    shape = dataset.train.shape[1:]
    cfg = resolve_config(parse_config(args.config), shape=shape, task=args.task)
    tcfg = config_to_traincfg(cfg)
    pretrained = None
    if args.pretrained is not None:
        pretrained = _build_flow(cfg, shape)
        restore_into(pretrained.store, load_checkpoint(args.pretrained), origin=args.pretrained)
        pretrained.mark_initialized()
    lines: list[str] = []
    net = train_unrolled(dataset, tcfg, pretrained, log=lines.append)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, net.store)
    _write_log(str(out) + ".log", lines)
    echo_config(cfg, out.parent)
    print(f"unrolled net saved to {out} ({len(lines)} epochs)")
    return 0


def _check_image_shape(cfg: dict, shape, what: str) -> None:
    expected = (cfg["channels"], cfg["height"], cfg["width"])
    if tuple(shape) != expected:
        raise DataError(
            f"{what} has shape {tuple(shape)} but the model was configured "
            f"for {expected}"
        )


def cmd_reconstruct(args) -> int:
    x_in = load_image(args.input)
    cfg = resolve_config(parse_config(args.config), task=args.task)
    _check_image_shape(cfg, x_in.shape, f"input image {args.input}")
    net = _load_net(cfg, x_in.shape, args.model)
    op = _operator(cfg, x_in.shape)
    if args.measure:
        rng = Prng(derive_seed(cfg["seed"], _TAG_MEASURE))
        y = make_measurement(op, x_in, cfg["sigma_n"], rng)
    else:
        y = x_in
    x_hat = reconstruct(net, y, op)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, x_hat)
    if args.emit_init:
        init_path = out.with_name(out.stem + "_init" + out.suffix)
        save_image(init_path, initial_guess(net))
    echo_config(cfg, out.parent)
    print(f"reconstruction written to {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    if dataset.test.size == 0:
        raise DataError(f"{args.data} has an empty test split")
    test = dataset.test
    shape = test.shape[1:]
    cfg = resolve_config(parse_config(args.config), task=args.task)
    _check_image_shape(cfg, shape, f"test split of {args.data}")
    net = _load_net(cfg, shape, args.model)
    op = _operator(cfg, shape)
    ids = dataset.ids["test"] if dataset.ids else list(range(len(test)))

    y = np.empty_like(test)
    for i, image_id in enumerate(ids):
        rng = Prng(derive_seed(cfg["seed"], _TAG_EVAL, int(image_id)))
        y[i] = make_measurement(op, test[i], cfg["sigma_n"], rng)
    x_hat = np.empty_like(test)
    bs = cfg["batch_size"]
    for start in range(0, len(test), bs):
        x_hat[start : start + bs] = net.reconstruct_batch(y[start : start + bs], op)

    rows = ["image_id,task,psnr_input,psnr_output"]
    p_in, p_out = [], []
    for i, image_id in enumerate(ids):
        pi = psnr(y[i], test[i])
        po = psnr(x_hat[i], test[i])
        p_in.append(pi)
        p_out.append(po)
        rows.append(f"{image_id},{cfg['task']},{pi:.6f},{po:.6f}")
    mean_in = sum(p_in) / len(p_in)
    mean_out = sum(p_out) / len(p_out)
    rows.append(f"MEAN,{cfg['task']},{mean_in:.6f},{mean_out:.6f}")
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text("".join(row + "\n" for row in rows))
    echo_config(cfg, report.parent)
    print(f"mean PSNR: input {mean_in:.6f} dB, output {mean_out:.6f} dB")
    return 0


# -- self test ----------------------------------------------------------------------


def _check_flow_round_trip(tol_inv):
    model = FlowModel((1, 16, 16), 2, 4, 16, ParamStore())
    model.randomize(Prng(0x5E1F01), scale=0.05)
    rng = Prng(0x5E1F02)
    x = rng.gauss_array((100, 1, 16, 16))
    z, _, _ = model.forward_batch(x)
    back, _ = model.inverse_batch(z)
    err = float(np.max(np.abs(back - x)))
    return err < tol_inv, f"max round-trip error {err:.3g}"


def _check_logdet():
    model = FlowModel((3, 2, 2), 1, 2, 8, ParamStore())
    model.randomize(Prng(0x5E1F03), scale=0.1)
    x = Prng(0x5E1F04).gauss_array((3, 2, 2))
    _, ld = flow_forward(x, model)
    h = 1e-5
    flat = x.ravel()
    cols = []
    for j in range(12):
        xp, xm = flat.copy(), flat.copy()
        xp[j] += h
        xm[j] -= h
        zp, _ = flow_forward(xp.reshape(3, 2, 2), model)
        zm, _ = flow_forward(xm.reshape(3, 2, 2), model)
        cols.append((zp - zm) / (2 * h))
    _, ld_num = np.linalg.slogdet(np.stack(cols, axis=1))
    err = abs(ld - ld_num)
    return err < 1e-6, f"analytic vs numeric log-det differ by {err:.3g}"


def _check_adjoints():
    shape = (1, 16, 16)
    rng = Prng(0x5E1F05)
    worst = 0.0
    for op in (
        Identity(shape),
        operator_for_task("inpaint", shape),
        operator_for_task("deblur", shape, sigma_b=1.0),
    ):
        for _ in range(50):
            u = rng.gauss_array(shape)
            v = rng.gauss_array(shape)
            worst = max(worst, abs(float((op.apply(u) * v).sum()) - float((u * op.adjoint(v)).sum())))
    return worst < 1e-8, f"worst adjoint dot-test error {worst:.3g}"


def _check_prox():
    z = np.array([1.3, -0.7])
    lam = 0.7
    grid = np.arange(-3.0, 3.0 + 1e-12, 0.01)
    u0, u1 = np.meshgrid(grid, grid, indexing="ij")
    obj = 0.5 * ((u0 - z[0]) ** 2 + (u1 - z[1]) ** 2) + 0.5 * lam * (u0**2 + u1**2)
    i, j = np.unravel_index(np.argmin(obj), obj.shape)
    err = float(np.max(np.abs(np.array([grid[i], grid[j]]) - prox_shrink(z, lam))))
    return err <= 0.01, f"prox vs grid argmin differ by {err:.3g}"


def _check_landweber():
    shape = (1, 16, 16)
    rng = Prng(0x5E1F06)
    net = UnrolledNet(shape, 3, 2, 1, 4)
    mus = [0.4, 0.6, 0.5]
    rhos = [-2.0, -1.5, -2.5]
    for fold, mu, rho in zip(net.folds, mus, rhos):
        fold.mu.value[...] = mu
        fold.rho.value[...] = rho
    op = operator_for_task("inpaint", shape)
    y = rng.gauss_array(shape)
    x = np.zeros(shape)
    lams = [fold.lam for fold in net.folds]
    for k in range(3):
        x = x + mus[k] * op.adjoint(y - op.apply(x))
        if k < 2:
            x = x / (1.0 + lams[k])
    err = float(np.max(np.abs(reconstruct(net, y, op) - x)))
    return err < 1e-10, f"identity-flow net vs Landweber differ by {err:.3g}"


def _check_grad(tol_grad):
    net = UnrolledNet((1, 8, 8), 2, 2, 1, 4)
    rng = Prng(0x5E1F07)
    for fold in net.folds:
        fold.flow.randomize(rng, scale=0.05)
    op = operator_for_task("inpaint", (1, 8, 8))
    x_true = rng.gauss_array((2, 1, 8, 8)) * 0.3
    y = op.apply(x_true) + 0.05 * rng.gauss_array((2, 1, 8, 8))

    def f(store):
        x_hat, pipe = net.reconstruct_batch_grad(y, op)
        diff = x_hat - x_true
        net.reconstruct_backward(pipe, 2.0 * diff / diff.size)
        return float((diff * diff).mean())

    # eps at the small end so the difference quotient carries its natural
    # roundoff floor (~1e-11); tolerances below that floor must fail
    err = grad_check(f, net.store, 64, eps=1e-7)
    return err < tol_grad, f"max relative gradient error {err:.3g}"


def _check_adam():
    store = ParamStore()
    p = store.add("w", np.array(1.0))
    state = AdamState(store)
    ours = []
    for _ in range(3):
        p.grad[...] = p.value  # gradient of 0.5 w^2
        adam_update(store, state, {"*": 0.1})
        ours.append(float(p.value))
    # independent scalar recurrence
    w, m, v = 1.0, 0.0, 0.0
    expect = []
    for t in range(1, 4):
        g = w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        expect.append(w)
    err = max(abs(a - b) for a, b in zip(ours, expect))
    return err < 1e-12, f"Adam sequence differs from recurrence by {err:.3g}"


def cmd_selftest(args) -> int:
    checks = [
        ("flow-round-trip", lambda: _check_flow_round_trip(args.tol_inv)),
        ("logdet-vs-jacobian", _check_logdet),
        ("operator-adjoints", _check_adjoints),
        ("prox-grid-oracle", _check_prox),
        ("landweber-equivalence", _check_landweber),
        ("end-to-end-gradients", lambda: _check_grad(args.tol_grad)),
        ("adam-recurrence", _check_adam),
    ]
    failed = []
    for name, fn in checks:
        t0 = time.monotonic()
        ok, detail = fn()
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail} ({time.monotonic() - t0:.2f}s)")
        if not ok:
            failed.append(name)
    if failed:
        print(f"self-test failed: {', '.join(failed)}")
        return 1
    print("self-test passed")
    return 0


# -- argument parsing ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowunfold",
        description="Unrolled proximal-gradient imaging with an invertible prior.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", type=int, nargs=2, default=[16, 16], metavar=("H", "W"))
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain", help="likelihood-pretrain a flow prior")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the unrolled network end to end")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pretrained", help="checkpoint of a pretrained prior")
    group.add_argument("--no-pretrain", action="store_true", help="identity-init ablation arm")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--emit-init", action="store_true")
    p.add_argument("--measure", action="store_true")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR report over a dataset's test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--tol-grad", type=float, default=1e-5)
    p.add_argument("--tol-inv", type=float, default=1e-8)
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlowUnfoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
