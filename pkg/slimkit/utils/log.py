import logging
import os
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler


def setup_logging(level: Optional[int] = None) -> None:
    """
    Route library logging through rich on stderr

    SLIMKIT_DEBUG=1 switches to DEBUG, otherwise only warnings show.
    """
    if level is None:
        level = logging.DEBUG if os.getenv("SLIMKIT_DEBUG") == "1" else logging.WARNING

    root = logging.getLogger("slimkit")
    root.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(console=Console(stderr=True), show_path=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
