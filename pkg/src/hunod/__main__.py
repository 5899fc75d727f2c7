from hunod.cli import main

raise SystemExit(main())
