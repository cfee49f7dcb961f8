use super::{NearestIndex, PointCloud};
use crate::error::{invalid, Result};
use crate::Real;

fn directional<T: Real>(from: &PointCloud<T>, to: &PointCloud<T>) -> Result<Vec<(usize, T)>> {
    if from.dim() != to.dim() {
        return invalid("clouds have different dimensions");
    }
    let idx = NearestIndex::new(to.points().clone())?;
    Ok(from
        .points()
        .rows()
        .into_iter()
        .map(|q| idx.nearest_sq(q))
        .collect())
}

fn mean<T: Real>(it: impl Iterator<Item = T>, n: usize) -> T {
    it.sum::<T>() / T::from_usize_lossy(n)
}

/// Half the sum of the two directional mean nearest-neighbour distances.
pub fn chamfer_l1<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    let ab = directional(a, b)?;
    let ba = directional(b, a)?;
    let m1 = mean(ab.iter().map(|p| p.1.sqrt()), ab.len());
    let m2 = mean(ba.iter().map(|p| p.1.sqrt()), ba.len());
    Ok((m1 + m2) * T::lit(0.5))
}

/// Sum of the two directional mean squared nearest-neighbour distances.
pub fn chamfer_l2<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    let ab = directional(a, b)?;
    let ba = directional(b, a)?;
    Ok(mean(ab.iter().map(|p| p.1), ab.len()) + mean(ba.iter().map(|p| p.1), ba.len()))
}

/// Mean absolute cosine between each point's normal and its nearest
/// neighbour's normal, averaged over both directions.
pub fn normal_consistency<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    let (Some(na), Some(nb)) = (a.normals(), b.normals()) else {
        return invalid("normal consistency needs normals on both clouds");
    };
    let one_way = |pairs: &[(usize, T)], from: &ndarray::Array2<T>, to: &ndarray::Array2<T>| {
        mean(
            pairs.iter().enumerate().map(|(i, &(j, _))| {
                from.row(i)
                    .iter()
                    .zip(to.row(j).iter())
                    .map(|(x, y)| *x * *y)
                    .sum::<T>()
                    .abs()
                    .min(T::one())
            }),
            pairs.len(),
        )
    };
    let ab = directional(a, b)?;
    let ba = directional(b, a)?;
    Ok((one_way(&ab, na, nb) + one_way(&ba, nb, na)) * T::lit(0.5))
}
