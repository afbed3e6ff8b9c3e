use std::collections::HashMap;

use autoalign::image_branch::*;
use autoalign::params::{Bound, ParamStore};
use autoalign::point_branch::*;
use autoalign_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> VoxelGridSpec {
    VoxelGridSpec::default()
}

#[test]
fn single_point_at_center() {
    let s = spec();
    let c = s.center([3, 7, 2]);
    let vs = voxelize(&[[c[0], c[1], c[2], 0.5]], &s);
    assert_eq!(vs.coords, vec![[3, 7, 2]]);
    let r = vs.raw_stats[0];
    assert_eq!(&r[..5], &[0.0, 0.0, 0.0, 0.5, 1.0]);
    assert_eq!(&r[5..], &c);
}

#[test]
fn symmetric_pair_has_zero_offset() {
    let s = spec();
    let c = s.center([10, 10, 3]);
    let vs = voxelize(&[[c[0] - 0.1, c[1], c[2], 0.0], [c[0] + 0.1, c[1], c[2], 0.0]], &s);
    assert_eq!(vs.len(), 1);
    assert!(vs.raw_stats[0][0].abs() < 1e-12);
    assert_eq!(vs.raw_stats[0][4], 2.0);
}

#[test]
fn max_face_goes_to_last_cell_and_outside_is_dropped() {
    let s = spec();
    let vs = voxelize(&[[32.0, 16.0, 1.0, 0.0], [32.1, 0.0, 0.0, 0.0], [-0.1, 0.0, 0.0, 0.0]], &s);
    assert_eq!(vs.coords, vec![[31, 31, 5]]);
    assert!(voxelize(&[], &s).is_empty());
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..33.0),
                rng.random_range(-17.0..17.0),
                rng.random_range(-2.5..1.5),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect()
}

#[test]
fn voxelize_matches_hash_grouping() {
    let s = spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Dense enough that many cells hold several points.
    let mut pts = random_cloud(&mut rng, 500);
    for p in pts.iter_mut().take(250) {
        p[0] = p[0].rem_euclid(4.0);
        p[1] = p[1].rem_euclid(3.0);
    }
    let mut groups: HashMap<[i64; 3], Vec<[f64; 4]>> = HashMap::new();
    for p in &pts {
        let inside = (0..3).all(|a| p[a] >= s.min[a] && p[a] <= s.max[a]);
        if inside {
            let key = std::array::from_fn(|a| ((p[a] - s.min[a]) / s.size[a]).floor() as i64);
            groups.entry(key).or_default().push(*p);
        }
    }
    let vs = voxelize(&pts, &s);
    assert_eq!(vs.len(), groups.len());
    for (j, c) in vs.coords.iter().enumerate() {
        let g = &groups[&[c[0] as i64, c[1] as i64, c[2] as i64]];
        let r = vs.raw_stats[j];
        assert_eq!(r[4], g.len() as f64);
        let ctr = s.center(*c);
        for a in 0..3 {
            let mut sum = 0.0;
            for p in g {
                sum += p[a];
            }
            assert_eq!(r[a], sum / g.len() as f64 - ctr[a]);
        }
        let mut isum = 0.0;
        for p in g {
            isum += p[3];
        }
        assert_eq!(r[3], isum / g.len() as f64);
    }
    // coords unique and sorted
    assert!(vs.coords.windows(2).all(|w| w[0] < w[1]));
}

fn embed_store(d: usize, seed: u64) -> ParamStore {
    let mut st = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_embed(&mut st, &mut rng, d);
    init_bev(&mut st, &mut rng, d, 4);
    for n in ["pts.embed.0.b", "pts.embed.1.b"] {
        for x in st.get_mut(n).unwrap().data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    st
}

#[test]
fn zero_weights_embed_to_zero() {
    let s = spec();
    let mut st = embed_store(16, 1);
    let names: Vec<String> = st.names().cloned().collect();
    for n in names {
        st.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let vs = voxelize(&random_cloud(&mut ChaCha8Rng::seed_from_u64(2), 100), &s);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let e = embed_voxels(&p, &vs, &s).unwrap();
    assert_eq!(tape.shape(e), vec![vs.len(), 16]);
    assert!(tape.value(e).iter().all(|&x| x == 0.0));
}

#[test]
fn embed_of_empty_set_is_an_error() {
    let tape = Tape::new();
    let st = embed_store(8, 1);
    let p = Bound::new(&tape, &st);
    assert!(embed_voxels(&p, &VoxelSet::default(), &spec()).is_err());
}

#[test]
fn embedding_is_row_equivariant() {
    let s = spec();
    let st = embed_store(16, 3);
    let vs = voxelize(&random_cloud(&mut ChaCha8Rng::seed_from_u64(4), 60), &s);
    let perm: Vec<usize> = (0..vs.len()).rev().collect();
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let a = tape.value(embed_voxels(&p, &vs, &s).unwrap());
    let b = tape.value(embed_voxels(&p, &vs.select(&perm), &s).unwrap());
    for (i, &j) in perm.iter().enumerate() {
        assert_eq!(&b[i * 16..(i + 1) * 16], &a[j * 16..(j + 1) * 16]);
    }
}

#[test]
fn single_voxel_scatters_to_one_cell() {
    let s = spec();
    let c = s.center([4, 9, 1]);
    let vs = voxelize(&[[c[0], c[1], c[2], 0.2]], &s);
    let st = ParamStore::new();
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let feats = tape.leaf(&Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let bev = scatter_bev(&p, feats, &vs, &s).unwrap();
    let v = tape.value(bev);
    let [nx, ny, _] = s.extents();
    assert_eq!(tape.shape(bev), vec![3, nx, ny]);
    let cell = 4 * ny + 9;
    for ch in 0..3 {
        for k in 0..nx * ny {
            let x = v[ch * nx * ny + k];
            if k == cell {
                assert_eq!(x, [0.5, -1.0, 2.0][ch]);
            } else {
                assert_eq!(x, 0.0);
            }
        }
    }
}

#[test]
fn shared_column_takes_elementwise_max() {
    let s = spec();
    let (a, b) = (s.center([2, 2, 0]), s.center([2, 2, 4]));
    let vs = voxelize(&[[a[0], a[1], a[2], 0.0], [b[0], b[1], b[2], 0.0]], &s);
    let tape = Tape::new();
    let st = ParamStore::new();
    let p = Bound::new(&tape, &st);
    let feats = tape.leaf(&Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, -1.0, 3.0, 0.5]).unwrap());
    let v = tape.value(scatter_bev(&p, feats, &vs, &s).unwrap());
    let [nx, ny, _] = s.extents();
    let cell = 2 * ny + 2;
    let got: Vec<f64> = (0..3).map(|ch| v[ch * nx * ny + cell]).collect();
    assert_eq!(got, vec![1.0, 3.0, 0.5]);
}

#[test]
fn bev_backbone_keeps_grid_extents() {
    let s = spec();
    let st = embed_store(8, 9);
    let vs = voxelize(&random_cloud(&mut ChaCha8Rng::seed_from_u64(4), 200), &s);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let e = embed_voxels(&p, &vs, &s).unwrap();
    let out = bev_backbone(&p, e, &vs, &s).unwrap();
    assert_eq!(tape.shape(out), vec![4, 32, 32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn voxelize_ignores_point_order(seed in 0u64..1000, n in 1usize..200) {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cloud(&mut rng, n);
        let mut shuffled = pts.clone();
        shuffled.reverse();
        let (a, b) = (voxelize(&pts, &s), voxelize(&shuffled, &s));
        prop_assert_eq!(&a.coords, &b.coords);
        for (x, y) in a.raw_stats.iter().zip(&b.raw_stats) {
            for k in 0..8 {
                prop_assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }
        let cells: usize = s.extents().iter().product();
        prop_assert!(a.len() <= n.min(cells));
    }
}

// ------------------------------------------------------------ image branch

fn backbone_store(channels: usize, stride: usize, seed: u64) -> ParamStore {
    let mut st = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_backbone(&mut st, &mut rng, channels, stride).unwrap();
    st
}

#[test]
fn backbone_extents_for_default_image() {
    let st = backbone_store(8, 8, 1);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let img = tape.leaf(&Tensor::zeros(&[3, 128, 192]));
    let b = backbone_forward(&p, img, 8).unwrap();
    assert_eq!((b.c5.h, b.c5.w, b.c5.stride), (16, 24, 8));
    assert_eq!(tape.shape(b.c5.var), vec![8, 16, 24]);
    assert_eq!(tape.shape(b.p5.var), vec![8, 16, 24]);
}

#[test]
fn zero_image_and_biases_give_zero_maps() {
    let mut st = backbone_store(4, 8, 2);
    let names: Vec<String> = st.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for n in names {
        st.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let b = backbone_forward(&p, tape.leaf(&Tensor::zeros(&[3, 16, 24])), 8).unwrap();
    assert!(tape.value(b.c5.var).iter().all(|&x| x == 0.0));
    assert!(tape.value(b.p5.var).iter().all(|&x| x == 0.0));
}

#[test]
fn indivisible_image_is_rejected() {
    let st = backbone_store(4, 8, 2);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    assert!(backbone_forward(&p, tape.leaf(&Tensor::zeros(&[3, 20, 24])), 8).is_err());
    assert!(stage_strides(12).is_err());
}

#[test]
fn stage_layout_reaches_the_stride() {
    for s in [4usize, 8, 16, 32] {
        let st = stage_strides(s).unwrap();
        assert!(st.len() >= 4);
        assert_eq!(st.iter().product::<usize>(), s);
    }
}

fn random_fmap(tape: &Tape, rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Tensor, FeatureMap) {
    let t = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let var = tape.leaf(&t);
    (
        t,
        FeatureMap {
            var,
            stride: 8,
            channels: c,
            h,
            w,
        },
    )
}

#[test]
fn identity_reduce_is_a_no_op() {
    let mut st = ParamStore::new();
    let mut w = Tensor::zeros(&[5, 5, 1, 1]);
    for i in 0..5 {
        w.data_mut()[i * 5 + i] = 1.0;
    }
    st.insert("img.reduce.w", w);
    st.insert("img.reduce.b", Tensor::zeros(&[5]));
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let (t, fm) = random_fmap(&tape, &mut ChaCha8Rng::seed_from_u64(1), 5, 3, 4);
    let out = reduce_dim(&p, &fm).unwrap();
    assert_eq!(tape.value(out.var), t.data());
}

#[test]
fn reduce_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut st = ParamStore::new();
    init_reduce(&mut st, &mut rng, 6, 4);
    st.get_mut("img.reduce.b").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let (x, fm) = random_fmap(&tape, &mut rng, 6, 3, 5);
    let out = reduce_dim(&p, &fm).unwrap();
    assert_eq!((out.h, out.w, out.channels), (3, 5, 4));
    let got = tape.value(out.var);
    let w = st.get("img.reduce.w").unwrap().data();
    let b = st.get("img.reduce.b").unwrap().data();
    for o in 0..4 {
        for pix in 0..15 {
            let mut acc = b[o];
            for i in 0..6 {
                acc += w[o * 6 + i] * x.data()[i * 15 + pix];
            }
            assert!((got[o * 15 + pix] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn reduce_has_a_one_pixel_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut st = ParamStore::new();
    init_reduce(&mut st, &mut rng, 3, 4);
    let tape = Tape::new();
    let p = Bound::new(&tape, &st);
    let (mut x, fm) = random_fmap(&tape, &mut rng, 3, 4, 4);
    let a = tape.value(reduce_dim(&p, &fm).unwrap().var);
    x.data_mut()[5] += 1.0; // channel 0, pixel (1, 1)
    let fm2 = FeatureMap { var: tape.leaf(&x), ..fm };
    let b = tape.value(reduce_dim(&p, &fm2).unwrap().var);
    for k in 0..a.len() {
        if k % 16 == 5 {
            assert_ne!(a[k], b[k]);
        } else {
            assert_eq!(a[k], b[k]);
        }
    }
}

#[test]
fn flatten_is_row_major() {
    let tape = Tape::new();
    let st = ParamStore::new();
    let p = Bound::new(&tape, &st);
    // channel 0 holds 10·v + u, channel 1 its negation
    let t = Tensor::new(&[2, 2, 2], vec![0.0, 1.0, 10.0, 11.0, -0.0, -1.0, -10.0, -11.0]).unwrap();
    let fm = FeatureMap {
        var: tape.leaf(&t),
        stride: 8,
        channels: 2,
        h: 2,
        w: 2,
    };
    let flat = flatten_spatial(&p, &fm).unwrap();
    assert_eq!(tape.shape(flat), vec![4, 2]);
    assert_eq!(tape.value(flat), vec![0.0, -0.0, 1.0, -1.0, 10.0, -10.0, 11.0, -11.0]);
    let back = unflatten_spatial(&p, flat, 2, 2).unwrap();
    assert_eq!(tape.value(back), t.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flattened_row_is_the_pixel(seed in 0u64..1000, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let tape = Tape::new();
        let st = ParamStore::new();
        let p = Bound::new(&tape, &st);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, fm) = random_fmap(&tape, &mut rng, c, h, w);
        let flat = tape.value(flatten_spatial(&p, &fm).unwrap());
        let k = rng.random_range(0..h * w);
        let (v, u) = unflatten_index(k, w);
        prop_assert_eq!((v, u), (k / w, k % w));
        for ch in 0..c {
            prop_assert_eq!(flat[k * c + ch], t.data()[(ch * h + v) * w + u]);
        }
        let back = unflatten_spatial(&p, tape.leaf(&Tensor::new(&[h * w, c], flat).unwrap()), h, w).unwrap();
        prop_assert_eq!(tape.value(back), t.data().to_vec());
    }
}
