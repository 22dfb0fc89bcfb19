use std::time::Instant;

fn main() {
    let (b, cin, cout, h, w, kh, kw) = (8usize, 16usize, 16usize, 64usize, 64usize, 3usize, 3usize);
    let (ho, wo) = (64usize, 64usize);
    let k = cin * kh * kw;
    let l = ho * wo;
    let x = vec![0.5f32; b * cin * h * w];
    let wt = vec![0.1f32; cout * k];
    let g = vec![0.2f32; b * cout * l];

    let im2col = |xs: &[f32]| -> Vec<f32> {
        let mut col = vec![0f32; k * l];
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * l;
                    for oy in 0..ho {
                        let iy = (oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize { continue; }
                        let src = (c * h + iy as usize) * w;
                        let dst = row + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                col[dst + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    };

    let iters = 20;
    let t0 = Instant::now();
    for _ in 0..iters { for bi in 0..b { std::hint::black_box(im2col(&x[bi*cin*h*w..(bi+1)*cin*h*w])); } }
    println!("im2col x{b}: {:.2} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);

    let col = im2col(&x[..cin*h*w]);
    let t0 = Instant::now();
    for _ in 0..iters {
        for bi in 0..b {
            let gb = &g[bi*cout*l..(bi+1)*cout*l];
            let mut dwp = vec![0f32; cout * k];
            unsafe { matrixmultiply::sgemm(cout, l, k, 1.0, gb.as_ptr(), l as isize, 1, col.as_ptr(), 1, l as isize, 0.0, dwp.as_mut_ptr(), k as isize, 1); }
            std::hint::black_box(dwp);
        }
    }
    println!("dW strided-B gemm x{b}: {:.2} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);

    let t0 = Instant::now();
    for _ in 0..iters {
        for bi in 0..b {
            let gb = &g[bi*cout*l..(bi+1)*cout*l];
            let mut gbt = vec![0f32; l * cout];
            for c in 0..cout { for i in 0..l { gbt[i*cout+c] = gb[c*l+i]; } }
            let mut dwt = vec![0f32; k * cout];
            unsafe { matrixmultiply::sgemm(k, l, cout, 1.0, col.as_ptr(), l as isize, 1, gbt.as_ptr(), cout as isize, 1, 0.0, dwt.as_mut_ptr(), cout as isize, 1); }
            std::hint::black_box(dwt);
        }
    }
    println!("dW gbt-contig gemm x{b}: {:.2} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);

    let t0 = Instant::now();
    for _ in 0..iters {
        for bi in 0..b {
            let gb = &g[bi*cout*l..(bi+1)*cout*l];
            let mut dcol = vec![0f32; k * l];
            unsafe { matrixmultiply::sgemm(k, cout, l, 1.0, wt.as_ptr(), 1, k as isize, gb.as_ptr(), l as isize, 1, 0.0, dcol.as_mut_ptr(), l as isize, 1); }
            std::hint::black_box(dcol);
        }
    }
    println!("dcol strided-A gemm x{b}: {:.2} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);

    let dcol = vec![0.3f32; k * l];
    let t0 = Instant::now();
    for _ in 0..iters {
        for _bi in 0..b {
            let mut dx = vec![0f32; cin * h * w];
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kh + ky) * kw + kx) * l;
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize { continue; }
                            let dst = (c * h + iy as usize) * w;
                            let src = row + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox + kx) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    dx[dst + ix as usize] += dcol[src + ox];
                                }
                            }
                        }
                    }
                }
            }
            std::hint::black_box(dx);
        }
    }
    println!("col2im x{b}: {:.2} ms", t0.elapsed().as_secs_f64()/iters as f64*1e3);
}
