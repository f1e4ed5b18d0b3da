import sys

from dualproc.cli import main

sys.exit(main())
