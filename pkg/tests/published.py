"""Per-appliance results reported for the original five-appliance house and
the Overall column printed next to them (accuracy and F1 in percent)."""

APPLIANCES = ["fridge", "washing_machine", "dishwasher", "microwave", "kettle"]

ANE = [0.0374, 0.0207, 0.0303, 0.7176, 0.2110]
RMSE = [19.0667, 297.8966, 201.9924, 97.8498, 666.7836]
ACCURACY_PCT = [94.2105, 95.1405, 97.7904, 99.1509, 93.3814]
F1_PCT = [90.1170, 96.1575, 94.5996, 47.6190, 76.1904]

# printed overall values and the number of decimals each was printed with
OVERALL = {"ane": (0.2034, 4), "rmse": (256.71782, 5), "accuracy": (95.93474, 5), "f1": (80.9367, 4)}
