/// Visits a row-major index space in innermost runs.
///
/// For each run along the last axis, `f` receives the starting offset of
/// every operand (computed from its stride vector), the run length and each
/// operand's stride along the last axis.
pub(crate) fn walk<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut([usize; N], usize, [usize; N]),
) {
    if shape.contains(&0) {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f([0; N], 1, [0; N]);
        return;
    }
    let last = rank - 1;
    let len = shape[last];
    let inner: [usize; N] = core::array::from_fn(|k| strides[k][last]);
    let mut idx = alloc::vec![0usize; last];
    let mut off = [0usize; N];
    loop {
        f(off, len, inner);
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..N {
                off[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..N {
                off[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}
