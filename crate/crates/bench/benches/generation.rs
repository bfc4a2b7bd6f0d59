use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use facemotion::ar::{generate_window, DecodeMode, Stream};
use facemotion::motion::MotionWindow;
use facemotion_bench::{clip, desk_models};

fn window(c: &mut Criterion) {
    let (codec, ar) = desk_models(1);
    let k = codec.config().window();
    let clip = clip(8.0);
    let audio = clip.features.window(0, 2 * k);
    let style = ar.style_encode(&clip.motion.padded_window(0, k)).unwrap();
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    g.bench_function("tokens_one_window", |b| {
        b.iter(|| generate_window(&ar, &codec, black_box(&audio), &style, None, &DecodeMode::Argmax, 0).unwrap())
    });
    let tokens = generate_window(&ar, &codec, &audio, &style, None, &DecodeMode::Argmax, 0).unwrap();
    let ctx = MotionWindow::neutral(k);
    g.bench_function("decode_one_window", |b| b.iter(|| codec.decode(black_box(&tokens), &ctx).unwrap()));
    g.bench_function("stream_4s", |b| {
        let mut stream = Stream::new(&ar, &codec, style.clone(), DecodeMode::Argmax);
        b.iter(|| stream.step(black_box(&audio)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, window);
criterion_main!(benches);
