"""Allow rtnlinv to be executed as a module with python -m rtnlinv."""

import sys
from .cli import main

if __name__ == "__main__":
    sys.exit(main())
