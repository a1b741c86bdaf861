"""Visual question answering: image features prefixed to a small causal language
model that is adapted with low-rank (LoRA) updates on its attention projections."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import eval_transform, load_image, sample_rng
from .metrics import normalize_text
from .nn import AdamW, Block, LayerNorm, Linear, Module, Parameter, token_cross_entropy, trunc_normal, warmup_cosine
from .vit import ViTEncoder

PAD, UNK, BOS, EOS, IMG = "<pad>", "<unk>", "<bos>", "<eos>", "<img>"
SPECIALS = (PAD, UNK, BOS, EOS, IMG)


class Tokenizer:
    """Word-level vocabulary over normalised (lowercase, punctuation-free) text."""

    def __init__(self, words):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts):
        vocab = sorted({w for t in texts for w in normalize_text(t).split()})
        return cls(vocab)

    def __len__(self):
        return len(self.itos)

    def id(self, token):
        return self.stoi[token]

    def encode(self, text):
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in normalize_text(text).split()]

    def decode(self, ids):
        skip = {self.stoi[s] for s in (PAD, BOS, EOS, IMG)}
        return " ".join(self.itos[i] for i in ids if i not in skip)

    def to_json(self):
        return list(self.itos[len(SPECIALS):])


# --------------------------------------------------------------------------
# low-rank adaptation
# --------------------------------------------------------------------------

def lora_linear(x, weight, bias, a, b, scale):
    """x W^T + bias + scale * (x A^T) B^T."""
    return T.linear(x, weight, bias) + T.linear(T.linear(x, a), b) * scale


class LoRALinear(Module):
    def __init__(self, base, rank, alpha, rng):
        if not 0 < rank < min(base.d_in, base.d_out):
            raise ValueError(f"LoRA rank {rank} must be below min(d_in, d_out) = {min(base.d_in, base.d_out)}")
        self.base = base
        base.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        bound = 1.0 / math.sqrt(base.d_in)
        self.lora_a = Parameter(rng.uniform(-bound, bound, size=(rank, base.d_in)).astype(base.weight.dtype))
        self.lora_b = Parameter(np.zeros((base.d_out, rank), dtype=base.weight.dtype))

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def d_in(self):
        return self.base.d_in

    @property
    def d_out(self):
        return self.base.d_out

    def forward(self, x):
        return lora_linear(x, self.base.weight, self.base.bias, self.lora_a, self.lora_b, self.scale)


# --------------------------------------------------------------------------
# language model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    dim: int = 32
    depth: int = 2
    heads: int = 4
    max_len: int = 128
    mlp_ratio: float = 4.0

    def to_dict(self):
        return asdict(self)


class TinyLM(Module):
    """Decoder-only transformer with tied input/output embeddings.

    Learned positions cover the whole input sequence, prefix embeddings included.
    """

    def __init__(self, config, rng):
        self.config = config
        self.tok_embed = Parameter(trunc_normal(rng, (config.vocab_size, config.dim)))
        self.pos_embed = Parameter(trunc_normal(rng, (config.max_len, config.dim)))
        self.blocks = [Block(config.dim, config.heads, config.mlp_ratio, rng, causal=True)
                       for _ in range(config.depth)]
        self.norm = LayerNorm(config.dim)

    def embed_text(self, ids):
        return self.tok_embed[np.asarray(ids, dtype=np.int64)]

    def forward_embeds(self, x):
        n = x.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence of {n} tokens exceeds max_len {self.config.max_len}")
        x = x + self.pos_embed[np.arange(n)]
        for blk in self.blocks:
            x = blk(x)
        h = self.norm(x)
        return T.matmul(h, self.tok_embed.T)

    def forward(self, ids, prefix=None):
        x = self.embed_text(ids)
        if prefix is not None:
            x = T.concat([prefix, x], axis=1)
        return self.forward_embeds(x)


def apply_lora(lm, rank=8, alpha=16, rng=None, targets=("q", "v")):
    """Freeze ``lm`` and wrap the named attention projections with LoRA adapters."""
    rng = rng or np.random.default_rng(0)
    lm.requires_grad_(False)
    for blk in lm.blocks:
        for name in targets:
            setattr(blk.attn, name, LoRALinear(getattr(blk.attn, name), rank, alpha, rng))
    return lm


def lora_layers(lm):
    return [getattr(blk.attn, n) for blk in lm.blocks for n in ("q", "k", "v", "o")
            if isinstance(getattr(blk.attn, n), LoRALinear)]


# --------------------------------------------------------------------------
# fused model
# --------------------------------------------------------------------------

class VQAModel(Module):
    def __init__(self, vit_config, lm_config, tokenizer, rng, pooled_only=False):
        self.vit_config = vit_config
        self.tokenizer = tokenizer
        self.pooled_only = pooled_only
        self.encoder = ViTEncoder(vit_config, rng)
        self.lm = TinyLM(lm_config, rng)
        self.proj = Linear(vit_config.enc_dim, lm_config.dim, rng)
        # zero projection: the initial prefix is exactly the <img> placeholder embedding
        self.proj.weight.data[...] = 0.0

    @property
    def num_image_tokens(self):
        return 1 if self.pooled_only else 1 + self.vit_config.num_patches

    def image_features(self, images):
        """(B, 1 [+ L], enc_dim) encoder outputs: pooled feature then patch tokens."""
        pooled, tokens = self.encoder(images)
        pooled = pooled.reshape((pooled.shape[0], 1, pooled.shape[1]))
        return pooled if self.pooled_only else T.concat([pooled, tokens], axis=1)

    def image_prefix(self, features):
        img = self.lm.tok_embed[np.array([self.tokenizer.id(IMG)])]
        return self.proj(features) + img

    def fuse(self, features, text_ids):
        """[projected image features || BOS || text] as LM input embeddings."""
        return T.concat([self.image_prefix(features), self.lm.embed_text(text_ids)], axis=1)

    def logits(self, features, text_ids):
        return self.lm.forward_embeds(self.fuse(features, text_ids))


def fuse(model, features, question_ids):
    if len(question_ids) == 0:
        raise ValueError("empty question")
    ids = np.array([[model.tokenizer.id(BOS)] + list(question_ids)])
    return model.fuse(features, ids)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class QAPair:
    image_path: str
    question: str
    answer: str


def read_qa_manifest(path):
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                pairs.append(QAPair(obj["image_path"], obj["question"], obj["answer"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from None
    return pairs


def resolve_image(root, image_path):
    p = Path(image_path)
    return p if p.is_absolute() else Path(root) / p


def encode_pair(tok, question, answer=None):
    """Token ids for BOS question [answer EOS] and the per-position loss weights."""
    q = tok.encode(question)
    if not q:
        raise ValueError("empty question")
    ids = [tok.id(BOS)] + q
    if answer is None:
        return ids, None
    a = tok.encode(answer) + [tok.id(EOS)]
    full = ids + a
    # logits at position t predict token t + 1; supervise only answer tokens
    weight = [0.0] * (len(ids) - 1) + [1.0] * len(a)
    return full, weight


def pad_batch(seqs, weights, pad_id):
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    w = np.zeros((len(seqs), n - 1))
    for i, (s, wt) in enumerate(zip(seqs, weights)):
        ids[i, :len(s)] = s
        w[i, :len(wt)] = wt
    return ids, w


def text_batch_loss(model_logits_fn, ids, weight, n_prefix):
    logits = model_logits_fn(ids[:, :-1])
    text_logits = logits[:, n_prefix:]
    return token_cross_entropy(text_logits, ids[:, 1:], weight)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def pretrain_lm(model, texts, epochs=300, lr=1e-2, batch_size=16, seed=0):
    """Language pretraining of the base LM (stand-in for a released LLM checkpoint).

    Sequences are ``<img> x P, BOS, text, EOS`` so the LM is used to an image
    placeholder prefix of the right length; every text position is supervised.
    """
    tok, lm = model.tokenizer, model.lm
    n_prefix = model.num_image_tokens
    seqs = [[tok.id(BOS)] + tok.encode(t) + [tok.id(EOS)] for t in texts]
    weights = [[1.0] * (len(s) - 1) for s in seqs]
    params = lm.trainable()
    opt = AdamW(params, betas=(0.9, 0.999), weight_decay=0.0)
    img = tok.id(IMG)
    n = len(seqs)
    steps = math.ceil(n / batch_size)
    losses = []
    for epoch in range(epochs):
        order = sample_rng(seed, epoch).permutation(n)
        for step in range(steps):
            idx = order[step * batch_size:(step + 1) * batch_size]
            ids, w = pad_batch([seqs[i] for i in idx], [weights[i] for i in idx], tok.id(PAD))
            prefix = lm.tok_embed[np.full((len(idx), n_prefix), img)]
            opt.zero_grad()
            loss = text_batch_loss(lambda x: lm(x, prefix=prefix), ids, w, n_prefix)
            loss.backward()
            opt.step(warmup_cosine(epoch + step / steps, 0, epochs, lr, 0.0))
            losses.append(float(loss.data))
    return losses


@dataclass
class VQARecipe:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 2e-5
    weight_decay: float = 0.0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    unfreeze_encoder: bool = False

    def lr_at(self, epoch):
        return warmup_cosine(epoch, 0, self.epochs, self.lr, 0.0)

    def to_dict(self):
        return asdict(self)


def prepare_images(paths_or_arrays, size, root="."):
    out = []
    for item in paths_or_arrays:
        image = load_image(resolve_image(root, item)) if isinstance(item, (str, Path)) else item
        out.append(eval_transform(image, size))
    return out


def compute_features(model, xs, batch_size=16):
    with T.no_grad():
        feats = [model.image_features(np.stack(xs[i:i + batch_size]).astype(model.lm.tok_embed.dtype)).data
                 for i in range(0, len(xs), batch_size)]
    return np.concatenate(feats, axis=0)


def trainable_vqa_parameters(model, recipe):
    """Parameters the VQA recipe trains: LoRA matrices, projection, optionally the encoder."""
    names = []
    for name, p in model.named_parameters():
        if ".lora_" in name or name.startswith("proj."):
            names.append((name, p))
        elif recipe.unfreeze_encoder and name.startswith("encoder."):
            names.append((name, p))
    return names


def vqa_finetune(model, pairs, images, recipe, seed, log=None):
    """Adapt ``model`` (already LoRA-wrapped) on QA pairs; the final epoch is returned.

    ``images`` maps each pair to its preprocessed (normalised) image array.
    """
    if not pairs:
        raise ValueError("empty QA manifest")
    tok = model.tokenizer
    model.requires_grad_(False)
    train_params = trainable_vqa_parameters(model, recipe)
    for _, p in train_params:
        p.requires_grad = True
        p.zero_grad()
    opt = AdamW(train_params, betas=(0.9, 0.999), weight_decay=recipe.weight_decay)
    encoded = [encode_pair(tok, p.question, p.answer) for p in pairs]
    frozen_feats = None if recipe.unfreeze_encoder else compute_features(model, images)
    n, bs = len(pairs), recipe.batch_size
    steps = math.ceil(n / bs)
    n_prefix = model.num_image_tokens
    dtype = model.lm.tok_embed.dtype
    lines = []
    for epoch in range(recipe.epochs):
        order = sample_rng(seed, epoch).permutation(n)
        for step in range(steps):
            idx = order[step * bs:(step + 1) * bs]
            ids, w = pad_batch([encoded[i][0] for i in idx], [encoded[i][1] for i in idx], tok.id(PAD))
            if frozen_feats is not None:
                feats = T.Tensor(frozen_feats[idx])
            else:
                feats = model.image_features(np.stack([images[i] for i in idx]).astype(dtype))
            lr = recipe.lr_at(epoch + step / steps)
            opt.zero_grad()
            loss = text_batch_loss(lambda x: model.logits(feats, x), ids, w, n_prefix)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite VQA loss at epoch {epoch + 1}")
            loss.backward()
            opt.step(lr)
            line = f"epoch {epoch + 1} step {epoch * steps + step + 1} loss {value:.8f} lr {lr:.8e}"
            lines.append(line)
            if log is not None:
                log(line)
    return lines


def greedy_decode(model, image, question, max_len=16, features=None):
    """Argmax decoding until EOS or ``max_len`` tokens; returns the answer text."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    tok = model.tokenizer
    if features is None:
        features = compute_features(model, [image])
    feats = T.Tensor(np.asarray(features).reshape((1,) + np.asarray(features).shape[-2:]))
    ids, _ = encode_pair(tok, question)
    out = []
    eos = tok.id(EOS)
    with T.no_grad():
        for _ in range(max_len):
            if model.num_image_tokens + len(ids) > model.lm.config.max_len:
                break
            logits = model.logits(feats, np.array([ids]))
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == eos:
                break
            out.append(nxt)
            ids.append(nxt)
    return tok.decode(out)


# --------------------------------------------------------------------------
# end-to-end entry points
# --------------------------------------------------------------------------

@dataclass
class LMPretrain:
    epochs: int = 300
    lr: float = 1e-2
    batch_size: int = 16


def train_vqa(pairs, images, vit_config, seed, encoder_state=None, recipe=None, lm_pretrain=None,
              pooled_only=False, lm_config=None, log=None):
    """Build tokenizer and model, pretrain the base LM, wrap it with LoRA and adapt.

    ``images`` holds one preprocessed array per pair.
    """
    if not pairs:
        raise ValueError("empty QA manifest")
    recipe = recipe or VQARecipe()
    lm_pretrain = lm_pretrain or LMPretrain()
    texts = [f"{p.question} {p.answer}" for p in pairs]
    tok = Tokenizer.build(texts)
    lm_config = lm_config or LMConfig(vocab_size=len(tok))
    model = VQAModel(vit_config, lm_config, tok, np.random.default_rng(seed), pooled_only=pooled_only)
    if encoder_state is not None:
        model.encoder.load_state_dict(encoder_state, prefix="encoder.")
    pretrain_lm(model, texts, epochs=lm_pretrain.epochs, lr=lm_pretrain.lr,
                batch_size=lm_pretrain.batch_size, seed=seed)
    apply_lora(model.lm, recipe.lora_rank, recipe.lora_alpha, sample_rng(seed, 0, 0, 2))
    vqa_finetune(model, pairs, images, recipe, seed, log=log)
    return model


def vqa_meta(model, recipe):
    layers = lora_layers(model.lm)
    return {
        "lm_config": model.lm.config.to_dict(),
        "vocab": model.tokenizer.to_json(),
        "pooled_only": model.pooled_only,
        "lora_rank": layers[0].rank if layers else None,
        "lora_alpha": layers[0].alpha if layers else None,
        "recipe": recipe.to_dict(),
    }


def build_vqa_model(vit_config, meta, state=None):
    """Rebuild a (LoRA-wrapped) VQA model from checkpoint metadata and weights."""
    tok = Tokenizer(meta["vocab"])
    model = VQAModel(vit_config, LMConfig(**meta["lm_config"]), tok, np.random.default_rng(0),
                     pooled_only=meta["pooled_only"])
    if meta.get("lora_rank"):
        apply_lora(model.lm, meta["lora_rank"], meta["lora_alpha"])
    if state is not None:
        model.load_state_dict(state)
    model.requires_grad_(False)
    return model


def prediction_rows(model, pairs, images):
    feats = compute_features(model, images)
    rows = []
    for i, p in enumerate(pairs):
        pred = greedy_decode(model, None, p.question, features=feats[i])
        rows.append({"image_path": p.image_path, "question": p.question, "reference": p.answer,
                     "prediction": pred})
    return rows
