"""
Run event logging
"""

import logging
from pathlib import Path
from typing import Dict


class RunLogger:
    """File-backed log of pipeline phases for one output directory"""

    def __init__(self, out_dir: Path):
        self.logger = logging.getLogger('wildeuler.run')
        self.package_logger = logging.getLogger('wildeuler')
        self.package_logger.setLevel(logging.INFO)

        log_dir = Path(out_dir) / 'logs'
        log_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = log_dir / 'run.log'

        self.handler = logging.FileHandler(self.log_path)
        formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s'
        )
        self.handler.setFormatter(formatter)
        # Module loggers propagate here, so the run file sees everything
        self.package_logger.addHandler(self.handler)

    def log_event(self, event_type: str, details: Dict):
        """Log a run event"""
        self.logger.info(f"Run Event: {event_type} - {details}")

    def close(self):
        self.package_logger.removeHandler(self.handler)
        self.handler.close()
