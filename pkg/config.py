import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    LOG_LEVEL = os.getenv('LPNET_LOG_LEVEL', 'INFO').upper()
    DEFAULT_BITS = int(os.getenv('LPNET_DEFAULT_BITS', 16))
    DEFAULT_THRESHOLD = float(os.getenv('LPNET_DEFAULT_THRESHOLD', 0.01))
    LR_DIVISOR = float(os.getenv('LPNET_LR_DIVISOR', 10.0))
    PROFILE_SAMPLES = int(os.getenv('LPNET_PROFILE_SAMPLES', 64))
    SEED = int(os.getenv('LPNET_SEED', 0))
    BATCH_SIZE = int(os.getenv('LPNET_BATCH_SIZE', 32))

class DevelopmentConfig(Config):
    LOG_LEVEL = 'DEBUG'

class ProductionConfig(Config):
    LOG_LEVEL = 'WARNING'

class TestingConfig(Config):
    LOG_LEVEL = 'WARNING'
    PROFILE_SAMPLES = 16

config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': Config
}
