"""Versioned prompt templates.

Templates are plain text files under ``<version>/<name>.txt`` filled with
``str.format``.
"""

from functools import lru_cache
from pathlib import Path

PROMPT_VERSION = "v1"
PROMPT_DIR = Path(__file__).parent


@lru_cache(maxsize=None)
def load_template(name: str, version: str = PROMPT_VERSION) -> str:
    """Read one template.

    Raises:
        FileNotFoundError: If the template does not exist
    """
    path = PROMPT_DIR / version / f"{name}.txt"
    if not path.is_file():
        raise FileNotFoundError(f"No prompt template {version}/{name}")
    return path.read_text(encoding="utf-8")


def render_prompt(name: str, version: str = PROMPT_VERSION, **fields: object) -> str:
    """Fill a template with ``fields``."""
    return load_template(name, version).format(**fields)
