use ddnerf::cli::*;
fn main() {
    let tmp = std::env::temp_dir().join("ddnerf_bench3");
    let _ = std::fs::remove_dir_all(&tmp);
    let mut cfg = RunConfig::default();
    cfg.scene = "spheres".into();
    cfg.width = 48; cfg.height = 48; cfg.n_quad = 128;
    cfg.out = tmp.join("data");
    cmd_gen(&cfg).unwrap();
    cfg.data = cfg.out.clone();
    for budget in [4usize] {
        for variant in ["dd"] {
            cfg.set("variant", variant).unwrap();
            cfg.n_coarse = budget; cfg.n_fine = budget;
            cfg.iters = 10000; cfg.batch = 32; cfg.hidden = vec![24,24]; cfg.num_frequencies = 4;
            cfg.seed = 1;
            cfg.out = tmp.join(format!("b{budget}_{variant}_{}", std::process::id()));
            let rep = cmd_train(&cfg).unwrap();
            let e = cmd_eval(&cfg.out.join("checkpoint.ddnt"), &cfg.data, None).unwrap();
            println!("spheres b{budget} {variant}: psnr {:.3} dMAEc {:.4} dMAEf {:.4} pc {:.4} pf {:.4} kl {:.4}",
                e.mean.psnr, e.mean.depth_mae_coarse, e.mean.depth_mae_fine, rep.photometric_coarse, rep.photometric_fine, rep.kl_term);
        }
    }
}
