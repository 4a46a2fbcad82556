import os
import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402

# reproducible by default; HYPOTHESIS_PROFILE=explore draws fresh random examples on every run
settings.register_profile("default", derandomize=True, print_blob=True)
settings.register_profile("explore", derandomize=False, print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_log.summary()
    if lines:
        terminalreporter.section("acceptance criteria")
        for text in lines:
            terminalreporter.write_line(text)
