"""Prompt-side extraction: prompt list (or LLM endpoint) -> .tfp file.

Prompt lists are plain text, one record per line::

    class_index<TAB>m<TAB>text

Slot ``m = 0`` is reserved for the hand-crafted "A photo of a {class}"
prompt and must be present for every class. All classes must carry the same
number of slots so the bank is rectangular.

The optional LLM path follows the two-step recipe: first ask the model to
describe the dataset's visual domain, then ask for short per-class visual
descriptions conditioned on that domain; each returned sentence becomes one
augmentation slot.
"""

from __future__ import annotations

import json
from pathlib import Path

from .encoders import build_encoder
from .errors import PromptListError
from .formats import write_prompt_bank, write_sidecar
from .jobs import ExtractJob, handcrafted_prompt

DESCRIBE_DATASET = (
    "Please write 3-4 sentences describing what the images in the following "
    "dataset look like: {description}"
)
DESCRIBE_CLASS = (
    "{context}\nWrite {m} short, distinct visual descriptions of a "
    "\"{class_name}\" as it would appear in such an image. One per line."
)


def parse_prompt_list(path, class_names) -> list:
    """Return prompts as a (C, M+1) nested list of texts, fully validated."""
    c = len(class_names)
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise PromptListError(
                f"{path}:{lineno}: expected class_index<TAB>m<TAB>text")
        try:
            cls, m = int(parts[0]), int(parts[1])
        except ValueError:
            raise PromptListError(
                f"{path}:{lineno}: class_index and m must be integers") from None
        if not 0 <= cls < c:
            raise PromptListError(
                f"{path}:{lineno}: class_index {cls} out of range [0, {c})")
        if m < 0:
            raise PromptListError(f"{path}:{lineno}: m must be >= 0")
        if (cls, m) in table:
            raise PromptListError(
                f"{path}:{lineno}: duplicate entry for class {cls} slot {m}")
        table[(cls, m)] = parts[2]

    missing = [class_names[i] for i in range(c) if (i, 0) not in table]
    if missing:
        raise PromptListError(
            "classes missing the hand-crafted slot-0 prompt: "
            + ", ".join(missing))
    for i, name in enumerate(class_names):
        expected = handcrafted_prompt(name)
        if table[(i, 0)] != expected:
            raise PromptListError(
                f"class {name!r} slot 0 must be exactly {expected!r}, "
                f"got {table[(i, 0)]!r}")

    slots = max(m for _, m in table) + 1
    rows = []
    for i in range(c):
        row = []
        for m in range(slots):
            if (i, m) not in table:
                raise PromptListError(
                    f"class {class_names[i]!r} missing slot {m} "
                    f"(bank must be rectangular with {slots} slots)")
            row.append(table[(i, m)])
        rows.append(row)
    return rows


def generate_prompts(endpoint: str, description: str, class_names,
                     m: int, session=None) -> list:
    """Ask an OpenAI-style completion endpoint for M augmentations per class."""
    import requests

    session = session or requests
    def ask(prompt):
        resp = session.post(endpoint, json={"prompt": prompt}, timeout=120)
        resp.raise_for_status()
        return resp.json()["text"]

    context = ask(DESCRIBE_DATASET.format(description=description))
    rows = []
    for name in class_names:
        raw = ask(DESCRIBE_CLASS.format(context=context, m=m,
                                        class_name=name))
        lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
        if len(lines) < m:
            raise PromptListError(
                f"endpoint returned {len(lines)} descriptions for "
                f"{name!r}, wanted {m}")
        rows.append([handcrafted_prompt(name)] + lines[:m])
    return rows


def prompt_rows_for_job(job: ExtractJob, class_names) -> list:
    if job.prompt_list:
        return parse_prompt_list(job.prompt_list, class_names)
    if job.llm_endpoint:
        return generate_prompts(job.llm_endpoint, job.dataset_description,
                                class_names, job.prompts_per_class)
    # hand-crafted only (M = 0)
    return [[handcrafted_prompt(name)] for name in class_names]


def extract_prompts(job: ExtractJob, class_names) -> Path:
    rows = prompt_rows_for_job(job, class_names)
    encoder = build_encoder(job.encoder, batch_size=job.batch_size)
    flat = [text for row in rows for text in row]
    emb = encoder.encode_texts(flat)
    emb = emb.reshape(len(rows), len(rows[0]), emb.shape[-1])
    out = Path(job.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prompt_bank(emb, out)
    write_sidecar(out, job.dataset_name, class_names)
    Path(str(out) + ".prompts.json").write_text(
        json.dumps(rows, indent=2) + "\n")
    return out
