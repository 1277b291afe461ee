import sys

from promptner.cli import main

sys.exit(main())
