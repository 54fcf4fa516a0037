"""Attention dumps: a manifest plus one float32 blob per (block, direction).

Layout of ``manifest.json``::

    {"format": "attention-dump/1", "blocks": 12, "heads": 4,
     "image_tokens": 64, "text_tokens": 29, "grid": [8, 8], "boundary": 8,
     "caption": "...", "subject_words": [...],
     "encoder_a_tokens": [...], "encoder_b_tokens": [...],
     "word_spans_a": {"circle": [1, 1]}, "word_spans_b": {"circle": [1, 5]},
     "files": [{"block": 1, "direction": "img2txt", "file": "block01_img2txt.bin",
                "shape": [4, 64, 29]}, ...]}

``img2txt`` blobs have shape (heads, image_tokens, text_tokens) and
``txt2img`` blobs (heads, text_tokens, image_tokens), both little-endian
float32, row-major. The manifest is validated completely before any blob
is read.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..attention import AttentionBundle
from ..toy_mmdit.tokenizer import TokenizedPrompt

FORMAT = "attention-dump/1"
DTYPE = np.dtype("<f4")
DIRECTIONS = ("img2txt", "txt2img")


class DumpError(ValueError):
    pass


def dump_attention(bundle: AttentionBundle, prompt: TokenizedPrompt, path) -> Path:
    if bundle.img2txt.dim() != 4:
        raise DumpError("dump a single sample; select it from the batch first")
    bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for b in range(bundle.num_blocks):
        for direction, tensor in zip(DIRECTIONS, (bundle.img2txt[b], bundle.txt2img[b])):
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(DTYPE))
            name = f"block{b + 1:02d}_{direction}.bin"
            (path / name).write_bytes(arr.tobytes(order="C"))
            files.append({"block": b + 1, "direction": direction, "file": name, "shape": list(arr.shape)})
    manifest = {
        "format": FORMAT,
        "blocks": bundle.num_blocks,
        "heads": bundle.num_heads,
        "image_tokens": bundle.num_image_tokens,
        "text_tokens": bundle.num_text_tokens,
        "grid": list(bundle.grid),
        "boundary": bundle.boundary,
        "caption": prompt.caption,
        "subject_words": list(prompt.subject_words),
        "encoder_a_tokens": list(prompt.encoder_a_tokens),
        "encoder_b_tokens": list(prompt.encoder_b_tokens),
        "word_spans_a": {k: list(v) for k, v in prompt.word_spans_a.items()},
        "word_spans_b": {k: list(v) for k, v in prompt.word_spans_b.items()},
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def _validate(manifest: dict, path: Path) -> None:
    if manifest.get("format") != FORMAT:
        raise DumpError(f"format: unsupported {manifest.get('format')!r}")
    for key in ("blocks", "heads", "image_tokens", "text_tokens", "grid", "boundary", "files"):
        if key not in manifest:
            raise DumpError(f"{key}: missing from manifest")
    blocks, heads = manifest["blocks"], manifest["heads"]
    n_img, n_txt = manifest["image_tokens"], manifest["text_tokens"]
    gh, gw = manifest["grid"]
    if gh * gw != n_img:
        raise DumpError(f"grid: {gh}x{gw} does not cover {n_img} image tokens")
    if not 0 <= manifest["boundary"] <= n_txt:
        raise DumpError(f"boundary: {manifest['boundary']} outside 0..{n_txt}")
    if len(manifest.get("encoder_a_tokens", [])) + len(manifest.get("encoder_b_tokens", [])) not in (0, n_txt):
        raise DumpError("encoder_a_tokens/encoder_b_tokens: lengths do not add up to text_tokens")
    want = {(b, d) for b in range(1, blocks + 1) for d in DIRECTIONS}
    have = {(f["block"], f["direction"]) for f in manifest["files"]}
    if have != want or len(manifest["files"]) != len(want):
        raise DumpError(f"files: expected {len(want)} blobs for {blocks} blocks, manifest lists {len(manifest['files'])}")
    for f in manifest["files"]:
        shape = [heads, n_img, n_txt] if f["direction"] == "img2txt" else [heads, n_txt, n_img]
        if list(f["shape"]) != shape:
            raise DumpError(f"files[{f['file']}].shape: {f['shape']} != {shape}")
        blob = path / f["file"]
        size = int(np.prod(shape)) * DTYPE.itemsize
        if not blob.is_file():
            raise DumpError(f"files[{f['file']}]: blob missing")
        if blob.stat().st_size != size:
            raise DumpError(f"files[{f['file']}]: blob has {blob.stat().st_size} bytes, expected {size}")


def load_attention(path) -> tuple[AttentionBundle, TokenizedPrompt]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise DumpError(f"manifest: no manifest.json in {path}") from err
    _validate(manifest, path)
    blocks = {d: [None] * manifest["blocks"] for d in DIRECTIONS}
    for f in manifest["files"]:
        arr = np.fromfile(path / f["file"], dtype=DTYPE).reshape(f["shape"])
        blocks[f["direction"]][f["block"] - 1] = torch.from_numpy(arr.astype(np.float32))
    bundle = AttentionBundle(
        torch.stack(blocks["img2txt"]),
        torch.stack(blocks["txt2img"]),
        manifest["boundary"],
        tuple(manifest["grid"]),
    )
    prompt = TokenizedPrompt(
        caption=manifest.get("caption", ""),
        encoder_a_tokens=tuple(manifest.get("encoder_a_tokens", [])),
        encoder_b_tokens=tuple(manifest.get("encoder_b_tokens", [])),
        word_spans_a={k: tuple(v) for k, v in manifest.get("word_spans_a", {}).items()},
        word_spans_b={k: tuple(v) for k, v in manifest.get("word_spans_b", {}).items()},
        subject_words=tuple(manifest.get("subject_words", [])),
    )
    return bundle, prompt
