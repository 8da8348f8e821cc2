import sys

from homsgd.cli import main

sys.exit(main())
