from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

HANDCRAFTED_TEMPLATE = "A photo of a {class}"


def handcrafted_prompt(class_name: str) -> str:
    return HANDCRAFTED_TEMPLATE.replace("{class}", class_name)


@dataclass(frozen=True)
class ExtractJob:
    """Everything one extraction run needs.

    ``dataset_path`` points at a folder of ``<class_name>/<image>`` entries
    (optionally nested under ``split``). Class order is the lexicographic
    order of the class directory names, recorded in the output sidecar.
    """

    dataset_path: Path
    output_path: Path
    dataset_name: str = ""
    split: str = ""
    encoder: str = "stub:32"
    batch_size: int = 64
    prompt_list: Optional[Path] = None
    # optional LLM-backed prompt generation
    llm_endpoint: str = ""
    dataset_description: str = ""
    prompts_per_class: int = 0  # M: augmentations beyond the hand-crafted one
    max_skip_fraction: float = 0.01

    def image_root(self) -> Path:
        root = Path(self.dataset_path)
        return root / self.split if self.split else root
