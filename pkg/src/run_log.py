import logging
from pathlib import Path

RUN_LOG_NAME = "run.log"


class RunLogHandler(logging.FileHandler):
    """
    Mirrors log records into <output_dir>/run.log, appending across invocations.
    The file is opened on the first record so commands that fail early leave no empty log.
    """

    def __init__(self, output_dir: Path) -> None:
        self.output_dir = output_dir
        super().__init__(output_dir / RUN_LOG_NAME, mode="a", encoding="utf-8", delay=True)

    def emit(self, record: logging.LogRecord) -> None:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError:
            # nothing we can do
            self.handleError(record)
            return
        super().emit(record)
