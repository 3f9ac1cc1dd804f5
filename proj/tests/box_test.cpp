#include "headlab/box.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <chrono>
#include <cmath>

using namespace headlab;
using testsupport::random_box;

TEST_CASE("encode identity and worked values") {
  const Box p{10, 10, 20, 20};
  const Delta zero = encode_delta(p, p);
  CHECK(zero.dx == 0.0);
  CHECK(zero.dy == 0.0);
  CHECK(zero.dw == 0.0);
  CHECK(zero.dh == 0.0);

  const Delta d = encode_delta(p, Box{12, 11, 20, 20});
  CHECK(d.dx == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.dy == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.dw == 0.0);
  CHECK(d.dh == 0.0);

  const Delta s = encode_delta(Box{0, 0, 10, 10}, Box{0, 0, 20, 20});
  CHECK(s.dx == 0.0);
  CHECK(s.dy == 0.0);
  CHECK(s.dw == doctest::Approx(5.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(s.dh == doctest::Approx(5.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("default lambda constants are 10, 10, 5, 5") {
  const DeltaScale s;
  CHECK(s.lx == 10.0);
  CHECK(s.ly == 10.0);
  CHECK(s.lw == 5.0);
  CHECK(s.lh == 5.0);
}

TEST_CASE("encode rejects degenerate boxes") {
  CHECK_THROWS_AS(encode_delta(Box{0, 0, 0, 10}, Box{0, 0, 10, 10}),
                  std::invalid_argument);
  CHECK_THROWS_AS(encode_delta(Box{0, 0, 10, 10}, Box{0, 0, 10, -1}),
                  std::invalid_argument);
}

TEST_CASE("decode identity and worked inverse") {
  const Box p{10, 10, 20, 20};
  const Box same = decode_full(p, Delta{0, 0, 0, 0});
  CHECK(same.x == p.x);
  CHECK(same.y == p.y);
  CHECK(same.w == p.w);
  CHECK(same.h == p.h);

  const Box moved = decode_full(p, Delta{1.0, 0.5, 0, 0});
  CHECK(moved.x == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(moved.y == doctest::Approx(11.0).epsilon(1e-12));
  CHECK(moved.w == 20.0);
  CHECK(moved.h == 20.0);
}

TEST_CASE("round trip over random pairs within 1e-9, under one second") {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(20240101);
  for (int i = 0; i < 10000; ++i) {
    const Box p = random_box(rng);
    // sides in [1, 512]; the size ratio stays below the saturating decode
    // clamp, as any matched proposal/target pair does
    Box g;
    g.w = std::clamp(p.w * std::exp(rng.uniform(-4.0, 4.0)), 1.0, 512.0);
    g.h = std::clamp(p.h * std::exp(rng.uniform(-4.0, 4.0)), 1.0, 512.0);
    g.x = rng.uniform(0.0, 400.0);
    g.y = rng.uniform(0.0, 400.0);
    const Box back = decode_full(p, encode_delta(p, g));
    CHECK(std::abs(back.x - g.x) < 1e-9);
    CHECK(std::abs(back.y - g.y) < 1e-9);
    CHECK(std::abs(back.w - g.w) < 1e-9);
    CHECK(std::abs(back.h - g.h) < 1e-9);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  CHECK(seconds < 1.0);
}

TEST_CASE("sequential composition equals joint decode exactly") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const Box p = random_box(rng);
    const Delta d{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3),
                  rng.uniform(-3, 3)};
    const Box joint = decode_full(p, d);

    const Box via_os =
        decode_scaling(decode_offset(p, d.dx, d.dy), d.dw, d.dh);
    CHECK(via_os.x == joint.x);
    CHECK(via_os.y == joint.y);
    CHECK(via_os.w == joint.w);
    CHECK(via_os.h == joint.h);

    const Box via_hv =
        decode_vertical(decode_horizontal(p, d.dx, d.dw), d.dy, d.dh);
    CHECK(via_hv.x == joint.x);
    CHECK(via_hv.y == joint.y);
    CHECK(via_hv.w == joint.w);
    CHECK(via_hv.h == joint.h);
  }
}

TEST_CASE("decode_offset moves only the center") {
  const Box p{10, 10, 20, 20};
  const Box o = decode_offset(p, 1.0, 0.5);
  CHECK(o.x == doctest::Approx(12.0));
  CHECK(o.y == doctest::Approx(11.0));
  CHECK(o.w == p.w);
  CHECK(o.h == p.h);
  const Box id = decode_offset(p, 0.0, 0.0);
  CHECK(id.x == p.x);
  CHECK(id.y == p.y);
}

TEST_CASE("decode_scaling rescales only the size") {
  const Box b{12, 11, 10, 10};
  const double ln2 = std::log(2.0);
  const Box s = decode_scaling(b, 5 * ln2, 5 * ln2);
  CHECK(s.x == b.x);
  CHECK(s.y == b.y);
  CHECK(s.w == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(s.h == doctest::Approx(20.0).epsilon(1e-12));
  const Box id = decode_scaling(b, 0.0, 0.0);
  CHECK(id.w == b.w);
  CHECK(id.h == b.h);
}

TEST_CASE("view independence: offset ignores size, scaling ignores center") {
  Rng rng(99);
  for (int i = 0; i < 1000; ++i) {
    const Box p = random_box(rng);
    const Box g = random_box(rng);
    // change the target size at fixed center: offset view unchanged
    Box resized = g;
    resized.w *= 2.5;
    resized.h *= 0.4;
    CHECK(encode_delta(p, g).dx == encode_delta(p, resized).dx);
    CHECK(encode_delta(p, g).dy == encode_delta(p, resized).dy);
    // change the target center at fixed size: scaling view unchanged
    Box moved = g;
    moved.x += 17.0;
    moved.y -= 4.0;
    CHECK(encode_delta(p, g).dw == encode_delta(p, moved).dw);
    CHECK(encode_delta(p, g).dh == encode_delta(p, moved).dh);
  }
}

TEST_CASE("decode clamps the size ratio instead of overflowing") {
  const Box p{0, 0, 16, 16};
  const Box out = decode_full(p, Delta{0, 0, 1e6, 1e6});
  CHECK(std::isfinite(out.w));
  CHECK(out.w == doctest::Approx(16.0 * 1000.0 / 16.0));
  // enormous shrink still decodes (no lower clamp needed for finiteness)
  CHECK(std::isfinite(decode_full(p, Delta{0, 0, -1e3, -1e3}).w));
}

TEST_CASE("iou worked values and properties") {
  const Box a{5, 5, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{100, 100, 10, 10}) == 0.0);
  CHECK(iou(a, Box{10, 5, 10, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const Box x = random_box(rng);
    const Box y = random_box(rng);
    CHECK(iou(x, y) == iou(y, x));
    CHECK(iou(x, x) == 1.0);
    CHECK(iou(x, y) >= 0.0);
    CHECK(iou(x, y) <= 1.0);
  }
}

TEST_CASE("area buckets split at 32^2 and 96^2") {
  CHECK(area_bucket(Box{0, 0, 30, 30}) == SizeBucket::kSmall);
  CHECK(area_bucket(Box{0, 0, 32, 32}) == SizeBucket::kMedium);
  CHECK(area_bucket(Box{0, 0, 96, 96}) == SizeBucket::kMedium);
  CHECK(area_bucket(Box{0, 0, 100, 100}) == SizeBucket::kLarge);
}

TEST_CASE("nms basics") {
  const Box b{5, 5, 10, 10};
  std::vector<Detection> one{{b, 1, 0.7}};
  CHECK(nms(one, 0.5) == std::vector<int>{0});

  std::vector<Detection> dup{{b, 1, 0.9}, {b, 1, 0.8}};
  CHECK(nms(dup, 0.5) == std::vector<int>{0});

  // IoU 1/3 < 0.5: both survive
  std::vector<Detection> apart{{Box{5, 5, 10, 10}, 1, 0.9},
                               {Box{10, 5, 10, 10}, 1, 0.8}};
  CHECK(nms(apart, 0.5).size() == 2);

  // different classes never suppress each other
  std::vector<Detection> classes{{b, 1, 0.9}, {b, 2, 0.8}};
  CHECK(nms(classes, 0.5).size() == 2);
}

TEST_CASE("nms matches the quadratic reference on random cases") {
  Rng rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Detection> dets;
    const int n = static_cast<int>(rng.uniform_int(1, 24));
    for (int i = 0; i < n; ++i) {
      Detection d;
      d.box = random_box(rng, 60.0, 4.0, 40.0);
      d.category = static_cast<int>(rng.uniform_int(1, 3));
      d.score = rng.uniform();
      dets.push_back(d);
    }
    CHECK(nms(dets, 0.5) == testsupport::nms_oracle(dets, 0.5));
  }
}

TEST_CASE("nms output properties") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = static_cast<int>(rng.uniform_int(2, 20));
    for (int i = 0; i < n; ++i)
      dets.push_back({random_box(rng, 50.0, 4.0, 30.0),
                      static_cast<int>(rng.uniform_int(1, 2)), rng.uniform()});
    const auto kept = nms(dets, 0.5);
    // subset, and no kept same-class pair above the threshold
    for (size_t i = 0; i < kept.size(); ++i) {
      CHECK(kept[i] >= 0);
      CHECK(kept[i] < n);
      for (size_t j = i + 1; j < kept.size(); ++j) {
        if (dets[kept[i]].category != dets[kept[j]].category) continue;
        CHECK(iou(dets[kept[i]].box, dets[kept[j]].box) <= 0.5);
      }
    }
    // order invariance up to the documented tie-break: reversing the input
    // keeps the same set of boxes when all scores are distinct
    std::vector<Detection> reversed(dets.rbegin(), dets.rend());
    auto kept_rev = nms(reversed, 0.5);
    for (int& idx : kept_rev) idx = n - 1 - idx;
    std::sort(kept_rev.begin(), kept_rev.end());
    auto kept_sorted = kept;
    std::sort(kept_sorted.begin(), kept_sorted.end());
    CHECK(kept_sorted == kept_rev);
  }
}

TEST_CASE("clip_to_image clamps corners") {
  const Box b{0, 0, 10, 10};  // extends to -5
  const Box c = clip_to_image(b, 100, 100);
  CHECK(c.x1() == 0.0);
  CHECK(c.y1() == 0.0);
  CHECK(c.w == doctest::Approx(5.0));
}
