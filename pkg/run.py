import os

from lpnet import create_cli

cli = create_cli(os.getenv('LPNET_CONFIG', 'default'))

if __name__ == '__main__':
    cli()
