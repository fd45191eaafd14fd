import sys

from guidelab.cli import main

sys.exit(main())
