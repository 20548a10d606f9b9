"""The hierarchical quota chain on a full-scale shaped hierarchy.

A global patch budget k is divided evenly down the four levels
brand -> model -> device -> image, with round-half-up at each step, so
every brand contributes the same number of training patches no matter
how lopsided its model/device/image counts are.
"""

from camid.balance import plan_counts
from camid.manifest import ImageRecord, Manifest

# the 13-brand / 18-model layout used throughout (devices, images per model)
LAYOUT = [
    ("Canon", "Ixus70", 3, 603), ("Casio", "EX-Z150", 5, 964),
    ("FujiFilm", "FinePixJ50", 3, 661), ("Kodak", "M1063", 5, 2527),
    ("Nikon", "CoolPixS710", 5, 961), ("Nikon", "D200", 2, 1697),
    ("Nikon", "D70", 4, 1664), ("Olympus", "mju_1050SW", 5, 1064),
    ("Panasonic", "DMC-FZ50", 3, 988), ("Pentax", "OptioA40", 4, 760),
    ("Praktica", "DCZ5.9", 5, 1056), ("Ricoh", "GX100", 5, 1059),
    ("Rollei", "RCP-7325XS", 3, 625), ("Samsung", "L74wide", 3, 720),
    ("Samsung", "NV15", 3, 676), ("Sony", "DSC-H50", 2, 630),
    ("Sony", "DSC-T77", 4, 777), ("Sony", "DSC-W170", 2, 439),
]

records = []
for brand, model, n_dev, n_img in LAYOUT:
    for i in range(n_img):
        records.append(ImageRecord(
            path=f"{brand}_{model}_{i % n_dev}_{i:05d}.JPG", brand=brand,
            model=model, device_index=i % n_dev, image_id=f"{i:05d}",
            width=3000, height=2000))
manifest = Manifest(records)

plan = plan_counts(manifest.records, k=260000)
print(f"k = {plan.k}, brands = {manifest.n_brands}")
print(f"per-brand quota k_b = {plan.k_brand}")
print("\nper-model quotas (k_m depends only on the brand's model count):")
for brand in manifest.brands():
    print(f"  {brand:>10}: k_m = {plan.k_model[brand]:>6} "
          f"across {len(manifest.models(brand))} model(s)")

print("\ndevice and image quotas for the Sony models:")
for model in manifest.models("Sony"):
    k_d = plan.k_device[("Sony", model)]
    devices = manifest.devices("Sony", model)
    k_i = plan.k_image[("Sony", model, devices[0])]
    print(f"  Sony/{model:>9}: k_d = {k_d:>5} over {len(devices)} devices, "
          f"k_i = {k_i} per image")

total = plan.total_quota
print(f"\nsum of all image quotas: {total} "
      f"(requested {plan.k}; rounding moves it by "
      f"{abs(total - plan.k) / plan.k:.2%})")
