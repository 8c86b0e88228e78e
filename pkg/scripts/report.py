"""Parameter and FLOP report for the toy and full-size head configurations."""

from vggtocc import flops
from vggtocc.decoder import HeadConfig


def params_table(title, cfg):
    rep = flops.report_parameters(cfg)
    print(f"# {title}")
    for k, v in rep.items():
        print(f"{k:<10} {v:>12,d}")
    print(f"{'total':<10} {sum(rep.values()):>12,d}\n")


def main():
    params_table("toy head (5x5x1 / 10x10x2 / 20x20x4)", HeadConfig())
    params_table("full-size head (50x50x4 / 100x100x8 / 200x200x16)", HeadConfig.full_size())
    for rep in flops.fusion_table().values():
        print(rep.to_text())
    print(f"unet / channel_gate_dw = {flops.fusion_ratio():.2f}x\n")
    cfg = HeadConfig.full_size()
    for s, spec in enumerate(cfg.scales):
        if "cross" in spec.blocks:
            rep = flops.count_pada_layer(cfg.pada_for(s), spec.dims, 6)
            print(rep.to_text())


if __name__ == "__main__":
    main()
