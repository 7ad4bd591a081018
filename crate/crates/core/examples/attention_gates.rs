//! Shows the channel and spatial gates of a two-dimensions attention module on
//! a feature map with one loud channel and one loud time-frequency cell.

use dualpath_se::attention2d::TwoDimAttention;
use dualpath_se::params::{ParamBuilder, ParamStore};
use dualpath_se::Tensor;

fn main() -> dualpath_se::Result<()> {
    let (c, t, f) = (4, 3, 5);
    let mut store = ParamStore::new();
    let att = TwoDimAttention::new(&mut ParamBuilder::new(&mut store, 0), "att", 3, (3, 3))?;
    let e = Tensor::from_fn(&[c, t, f], |i| {
        let (ch, cell) = (i / (t * f), i % (t * f));
        0.1 + if ch == 2 { 1.0 } else { 0.0 } + if cell == 7 { 2.0 } else { 0.0 }
    });

    let gc = att.channel_gate(&store, &e)?;
    println!("channel gate: {:.3?}", gc.data());
    let gs = att.spatial_gate(&store, &e)?;
    for row in gs.data().chunks(f) {
        println!("spatial gate: {row:.3?}");
    }
    let out = att.apply(&store, &e)?;
    let energy = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    println!("output energy / input energy = {:.3}", energy(&out) / energy(&e));

    store.map_values(|_, t| t.data_mut().fill(0.0));
    let quarter = att.apply(&store, &e)?;
    println!("with zero parameters every gate is 0.5: output = E/4 is {}", quarter.data().iter().zip(e.data()).all(|(o, x)| *o == x / 4.0));
    Ok(())
}
