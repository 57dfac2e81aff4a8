import sys

from suslab.cli import main

sys.exit(main())
