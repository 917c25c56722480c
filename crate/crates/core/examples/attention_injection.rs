//! How an image prompt reaches each frame through cross-frame attention.
//!
//! Frame 0 attends over the prompt keys; later frames only see the prompt
//! through frame 0's updated values.

use videobooth::injection::{injected_cross_frame_attention, InjectionOptions, InjectionProjection};
use videobooth::unet::{cross_frame_attention_base, AttnProj};
use videobooth::{Graph, RngStream};

fn main() -> videobooth::Result<()> {
    let (frames, tokens, c) = (5, 6, 8);
    let mut rng = RngStream::new(3);
    let g = Graph::<f64>::new();
    let mut w = |r, c| g.constant(rng.normal_tensor::<f64>(vec![r, c]).scale(1.0 / (c as f64).sqrt()));
    let base = AttnProj {
        q: w(c, c),
        k: w(c, c),
        v: w(c, c),
        out_w: w(c, c),
        out_b: None,
        heads: 2,
    };
    let proj = InjectionProjection { k: base.k, v: base.v };
    let x = g.constant(rng.normal_tensor::<f64>(vec![1, frames, tokens, c]));
    let prompt = g.constant(rng.normal_tensor::<f64>(vec![1, 9, c]).scale(2.0));

    let plain = g.value(cross_frame_attention_base(&g, x, &base)?);
    println!("per-frame change caused by the prompt (L2):");
    for recursive in [false, true] {
        let opts = InjectionOptions { enabled: true, recursive };
        let y = g.value(injected_cross_frame_attention(&g, x, Some(prompt), &base, &proj, opts)?);
        let per = tokens * c;
        let norms: Vec<String> = (0..frames)
            .map(|f| {
                let d: f64 = (f * per..(f + 1) * per).map(|i| (y.data()[i] - plain.data()[i]).powi(2)).sum();
                format!("{:.3}", d.sqrt())
            })
            .collect();
        println!("  recursive={recursive:<5} [{}]", norms.join(", "));
    }
    let off = InjectionOptions { enabled: false, recursive: false };
    let y = g.value(injected_cross_frame_attention(&g, x, Some(prompt), &base, &proj, off)?);
    println!("injection disabled is bitwise the base attention: {}", y.bitwise_eq(&plain));
    Ok(())
}
