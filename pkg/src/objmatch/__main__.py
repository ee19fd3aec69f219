from objmatch.cli import main

main()
