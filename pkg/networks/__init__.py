# Parameterised networks: conv blocks, encoders, decoder, MI estimator nets
