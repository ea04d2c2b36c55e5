import sys

from exitscan.cli import main

sys.exit(main())
