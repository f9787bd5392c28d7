"""
dgpsim - simulador de aprendizado colaborativo com poda dupla de gradientes.

Modulos:
    numerics  - tensores, RNG determinista, SGD e Adam
    model     - MLP, gradientes analiticos, VJP e modulo imprint
    defense   - Top-k, DGP, DP, realimentacao de erro e ADGP
    attack    - inferencia de rotulo, ataque por vies, por otimizacao e imprint
    metrics   - distancias, MSE/PSNR/SSIM e contabilidade de bytes
    sim       - datasets sinteticos e o laco de treinamento colaborativo
    theory    - verificacao das garantias formais
    cli       - ponto de entrada `dgpsim`
"""

__version__ = '0.1.0'
