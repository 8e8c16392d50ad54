//! Studentize the mean of a simulated AR(1) series.

use studentized_ts::lrv::{studentizing_factor, Variant};
use studentized_ts::simulate::{gen_linear_process, make_ar1_spec, SeedSpec};
use studentized_ts::studentize::{studentized_statistic, SmoothModel};
use studentized_ts::tapers::{make_weights, Taper};

fn main() -> studentized_ts::Result<()> {
    let spec = make_ar1_spec(0.5, 1.0, 1e-12)?;
    let x = gen_linear_process(&spec, 500, SeedSpec::new(42, 0))?;
    let scheme = make_weights(&Taper::Parzen, 8)?;
    let model = SmoothModel::identity().with_mu(vec![0.0])?;
    let tau_sq = studentizing_factor(&x, &model, &scheme, Variant::V0)?;
    let t = studentized_statistic(&x, &model, &scheme, Variant::V0)?;
    println!("tau^2 = {}, T = {}", tau_sq.value, t.t);
    Ok(())
}
