use crate::real::Real;
use crate::voxelgrid::{Dims5, Tensor5};

use super::{check_dims, OpError};

#[derive(Debug, Clone)]
pub struct ConcatContext {
    a: Dims5,
    b: Dims5,
}

/// Stack channels of `a` followed by channels of `b`.
pub fn concat_channels<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<(Tensor5<T>, ConcatContext), OpError> {
    let (da, db) = (a.dims(), b.dims());
    check_dims("concat_channels", da.with_channels(db.channels), db)?;
    let dims = da.with_channels(da.channels + db.channels);
    let mut data = Vec::with_capacity(dims.len());
    for n in 0..da.batch {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    let out = Tensor5::from_vec(dims, data).expect("concat length");
    Ok((out, ConcatContext { a: da, b: db }))
}

/// Split the incoming gradient back into the `a` and `b` channel blocks.
pub fn concat_channels_backward<T: Real>(
    grad_out: &Tensor5<T>,
    ctx: ConcatContext,
) -> Result<(Tensor5<T>, Tensor5<T>), OpError> {
    let ConcatContext { a, b } = ctx;
    check_dims("concat_channels_backward", a.with_channels(a.channels + b.channels), grad_out.dims())?;
    let split = a.channels * a.spatial_len();
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for n in 0..a.batch {
        let s = grad_out.sample(n);
        ga.extend_from_slice(&s[..split]);
        gb.extend_from_slice(&s[split..]);
    }
    Ok((Tensor5::from_vec(a, ga).expect("len"), Tensor5::from_vec(b, gb).expect("len")))
}
