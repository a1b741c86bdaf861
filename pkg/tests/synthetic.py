"""Deterministic synthetic images and corpora shared by the tests."""

import numpy as np

from ophthmae.tensor import Tensor


def fundus_like(n, size=64, seed=0):
    """Orange discs on black with a bright optic-disc blob, uint8 (3, size, size)."""
    rng = np.random.default_rng(seed)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    r2 = (yy - 0.5) ** 2 + (xx - 0.5) ** 2
    inside = r2 < 0.45 ** 2
    out = []
    for _ in range(n):
        col = np.array([rng.normal(180, 25), rng.normal(85, 15), rng.normal(40, 10)])
        shade = 1 - 0.8 * r2 / 0.45 ** 2 * rng.uniform(0.3, 0.6)
        img = col[:, None, None] * shade[None]
        cy = 0.5 + rng.uniform(-0.15, 0.15)
        cx = 0.5 + rng.choice([-1, 1]) * rng.uniform(0.12, 0.22)
        disc = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.06 ** 2))
        img = img + np.array([70, 110, 90])[:, None, None] * disc[None]
        out.append(np.clip(img * inside[None], 0, 255).astype(np.uint8))
    return out


def two_class(n, size=64, seed=0):
    """Fundus-like images; odd indices get a green-dominant colour cast (class 1)."""
    images = fundus_like(n, size, seed)
    labels = []
    for i, im in enumerate(images):
        if i % 2:
            images[i] = np.clip(im[[1, 0, 2]].astype(np.float64) * np.array([1.0, 1.6, 1.0])[:, None, None],
                                0, 255).astype(np.uint8)
        labels.append(i % 2)
    return images, labels


TOY_QA = [
    ("what modality is this image", "color fundus photograph"),
    ("is there diabetic retinopathy", "yes"),
    ("which eye is shown", "left eye"),
    ("is the optic disc visible", "yes the optic disc is visible"),
    ("what is the cup to disc ratio", "about zero point three"),
    ("are there hemorrhages", "no hemorrhages are seen"),
    ("is the macula normal", "the macula looks normal"),
    ("what lesion is present", "drusen near the fovea"),
    ("is there vessel tortuosity", "no"),
    ("what is the most likely diagnosis", "age related macular degeneration"),
]


def swap_param(module, dotted, value):
    """Replace the parameter at ``dotted`` (e.g. ``blocks.0.attn.q.weight``); returns the old one."""
    *path, leaf = dotted.split(".")
    owner = module
    for part in path:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    old = getattr(owner, leaf)
    setattr(owner, leaf, value)
    return old


def param_grad_error(module, dotted, loss_fn, eps=1e-5, order=2):
    """grad_check of ``loss_fn()`` with respect to one named parameter of ``module``."""
    from ophthmae.tensor import grad_check

    original = dict(module.named_parameters())[dotted]

    def f(t):
        old = swap_param(module, dotted, t)
        try:
            return loss_fn()
        finally:
            swap_param(module, dotted, old)

    return grad_check(f, original.data, eps, order)


def scale_params(module, rng, bias_std=0.3):
    """Unit-gain random parameters: weights N(0, 1/fan_in), norm gains near 1.

    The default init (tiny weights, zero biases) leaves many gradient entries
    near zero, where finite differences only measure rounding noise.
    """
    for name, p in module.named_parameters():
        if p.ndim >= 2:
            p.data = rng.normal(0.0, 1.0 / np.sqrt(p.shape[-1]), size=p.shape).astype(p.dtype)
        elif "norm" in name and name.endswith("weight"):
            p.data = (1.0 + rng.normal(0.0, 0.2, size=p.shape)).astype(p.dtype)
        else:
            p.data = rng.normal(0.0, bias_std, size=p.shape).astype(p.dtype)


def projection(shape, seed=123):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def write_dataset(root, n=20, size=32, seed=0, name="toy"):
    """Two-class PNG dataset plus manifest under ``root``; returns the manifest path."""
    from ophthmae.data import ImageRecord, Manifest, save_image, write_manifest

    images, labels = two_class(n, size, seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (im, y) in enumerate(zip(images, labels)):
        save_image(im, root / "img" / f"{i:03d}.png")
        records.append(ImageRecord(f"img/{i:03d}.png", "CFP", [y], 0.1))
    path = root / f"{name}.jsonl"
    write_manifest(Manifest(name, ["plain", "cast"], records, str(root)), path)
    return path


def write_qa(root, pairs=TOY_QA, size=32):
    """One fundus-like image per QA pair plus a JSON-lines QA manifest."""
    import json

    from ophthmae.data import save_image

    (root / "qa").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (im, (q, a)) in enumerate(zip(fundus_like(len(pairs), size, seed=5), pairs)):
        save_image(im, root / "qa" / f"{i}.png")
        lines.append(json.dumps({"image_path": f"qa/{i}.png", "question": q, "answer": a}))
    path = root / "qa.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
