"""Allow ``python -m lim``."""
import sys

from .cli import main

sys.exit(main())
