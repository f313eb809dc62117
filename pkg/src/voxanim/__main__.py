from voxanim.cli import main

main()
