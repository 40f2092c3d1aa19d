"""Dataset/prompt embedding exporter for the federated adaptation core."""

from .encoders import CLIPEncoder, StubEncoder, build_encoder
from .errors import DatasetError, EncoderError, ExtractorError, PromptListError
from .images import extract_images, list_classes
from .jobs import ExtractJob, handcrafted_prompt
from .prompts import extract_prompts, generate_prompts, parse_prompt_list

__version__ = "0.1.0"

__all__ = [
    "CLIPEncoder",
    "StubEncoder",
    "build_encoder",
    "DatasetError",
    "EncoderError",
    "ExtractorError",
    "PromptListError",
    "extract_images",
    "list_classes",
    "ExtractJob",
    "handcrafted_prompt",
    "extract_prompts",
    "generate_prompts",
    "parse_prompt_list",
    "__version__",
]
