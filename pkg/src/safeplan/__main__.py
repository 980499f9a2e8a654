import sys

from safeplan.cli import main

sys.exit(main())
