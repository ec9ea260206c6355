import sys

from reprogram_lab.app import main

sys.exit(main())
