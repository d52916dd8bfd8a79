
# 音频配置
SAMPLE_RATE = 16000
PCM_SCALE = 32768.0

# STFT配置（Hann窗 512，帧移 128）
WIN_LEN = 512
HOP = 128

# 数据合成配置
SNR_GRID = [-10.0, -5.0, 0.0, 5.0, 10.0]
SPLIT_RATIOS = (0.7, 0.2, 0.1)
SPLIT_NAMES = ("train", "val", "test")
PEAK_TARGET = 0.99
MASTER_SEED = 20240501

# 模型配置（桌面规模默认值）
GRU_HIDDEN = 64
D_MODEL = 32
N_HEADS = 4
N_REPEATS = 2
D_FF = 64
# 注意力分块：每块注意力分数矩阵最多这么多个元素（float64 约 32 MB）
ATTENTION_CHUNK_ELEMENTS = 4_000_000

# 训练配置
SEGMENT_LEN = 32000
BATCH_SIZE = 4
TRAIN_STEPS = 200
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_EVERY = 50
LOSS_CAP_DB = 60.0
TRAIN_SEED = 0
CROP_RETRIES = 8

# 评测配置
SNR_CAP_DB = 100.0
SNR_BIN_WIDTH = 5.0
SNR_BIN_RANGE = (-10.0, 10.0)
EVAL_WORKERS = 1

# STOI配置（计算由 pystoi 完成：10 kHz、15 个三分之一倍频带、30 帧片段、-15 dB 截断）
STOI_EXTENDED = False

# 梯度检查配置
GRADCHECK_EPS = 1e-5
GRADCHECK_THRESHOLD = 1e-4
