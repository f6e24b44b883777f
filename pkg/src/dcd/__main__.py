import sys

from dcd.cli import main

sys.exit(main())
