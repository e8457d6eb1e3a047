# GREAT 梯度对抗训练工具包
