use layerlab_core::geometry::{gammas_from_frames, tangent_frame_at, InterfaceGraph};
use layerlab_core::metric::canonical_plane_bases;

fn main() {
    let bowl = InterfaceGraph::polynomial(3, vec![0.0, 0.25, -0.018], 3.5);
    let rad = 1.42;
    let base = 0.25 * std::f64::consts::PI;
    let mut frames = Vec::new();
    for k in 0..3 {
        let ang = base + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
        let xp = [rad * ang.cos(), rad * ang.sin()];
        frames.push(tangent_frame_at(&bowl, &xp).unwrap());
    }
    let gammas = gammas_from_frames(&frames[0], &frames[1], &frames[2]).unwrap();
    println!("gammas: {} {} {}", gammas.gamma1, gammas.gamma2, gammas.gamma3);
    let q = &gammas.to_canonical;
    let planes = canonical_plane_bases(&gammas, 3);
    for (k, f) in frames.iter().enumerate() {
        for t in &f.tangents {
            let w = q * t;
            // residual against canonical plane k
            let mut r = w.clone();
            for b in &planes[k] {
                let c = b.dot(&r);
                r -= b * c;
            }
            println!("pole {k}: tangent image {:?} residual {:.3e}", w.as_slice(), r.norm());
        }
        let wn = q * &f.normal;
        println!("pole {k}: normal image {:?}", wn.as_slice());
    }
}
