"""Fixed prompt templates for the caption and reformulation backends."""

from .errors import EmptyCaption

DEFAULT_WORD_CAP = 12

# Prompt sent to external captioning backends.
CAPTION_PROMPT = (
    "Describe this image in detail, covering object, color, style, and setting."
)

REFORMULATION_PROMPT_TEMPLATE = (
    "You have two captions for two images, image A and image B, "
    "you are supposed to write a reformulation text describing "
    "changing from image A to image B.\n"
    "caption A: {caption_a}\n"
    "caption B: {caption_b}\n"
    "answer should be concise and within 12 words, only contain normal words, "
    "do not use special characters.\n"
    "Difference:"
)


def render_reformulation_prompt(caption_a: str, caption_b: str) -> str:
    """Substitute the two captions into the fixed reformulation template."""
    if not caption_a or not caption_a.strip():
        raise EmptyCaption("caption A is empty")
    if not caption_b or not caption_b.strip():
        raise EmptyCaption("caption B is empty")
    return REFORMULATION_PROMPT_TEMPLATE.format(caption_a=caption_a, caption_b=caption_b)
