// Training loops: loss definition, the Adam optimizer, adapter / masked /
// base training invariants, and finite-difference verification of the
// end-to-end analytic gradients.
#include <catch2/catch_amalgamated.hpp>

#include <memory>
#include <numeric>
#include <vector>

#include "helpers.hpp"
#include "miva/trainer.hpp"

using namespace miva;

namespace {

TrainClip<float> make_clip(const ModelDims& md, const PatchAutoencoder<float>& vae, uint64_t seed,
                           int extra, bool with_masks, int pattern = -1) {
    Rng rng(seed);
    TrainClip<float> c;
    c.video.Hl = md.lat_h;
    c.video.Wl = md.lat_w;
    int F = md.frames + extra;
    for (int f = 0; f < F; f++)
        c.video.frames.push_back(rng.gaussian_mat<float>(md.sites, md.channels));
    if (with_masks) {
        c.mask_lat.Hl = md.lat_h;
        c.mask_lat.Wl = md.lat_w;
        for (int f = 0; f < F; f++) {
            Mat<float> m = Mat<float>::Zero(md.image_size, md.image_size);
            int x0 = int(rng.randint(uint64_t(md.image_size - 6)));
            m.block(4, x0, 6, 6).setConstant(1.0f);
            c.mask_px.maps.push_back(m);
            c.mask_lat.frames.push_back(vae.encode_mask(m));
        }
    }
    c.pattern = pattern;
    return c;
}

double mean_tail(const std::vector<double>& v, size_t n) {
    n = std::min(n, v.size());
    return std::accumulate(v.end() - long(n), v.end(), 0.0) / double(n);
}

}  // namespace

TEST_CASE("denoise loss is the mean squared error over the counted rows") {
    ModelDims md = tiny_dims();
    Rng rng(150);
    Mat<double> pred = rng.gaussian_mat<double>(md.rows(), md.channels);
    auto truth =
        std::make_shared<const Mat<double>>(rng.gaussian_mat<double>(md.rows(), md.channels));

    for (bool skip : {true, false}) {
        Tape<double> tp;
        auto vh = tp.leaf(pred, true);
        auto loss = denoise_loss<double>(tp, vh, truth, md, skip);
        Eigen::Index r0 = skip ? md.sites : 0;
        double want = 0.0;
        for (Eigen::Index r = r0; r < md.rows(); r++)
            for (Eigen::Index c = 0; c < md.channels; c++) {
                double d = pred(r, c) - (*truth)(r, c);
                want += d * d;
            }
        want /= double((md.rows() - r0) * md.channels);
        CHECK(tp.val(loss)(0, 0) == Catch::Approx(want).epsilon(1e-12));
    }

    ModelDims one = md;
    one.frames = 1;
    Tape<double> tp;
    auto vh = tp.leaf(pred.topRows(md.sites), true);
    CHECK_THROWS_AS(denoise_loss<double>(tp, vh, truth, one, true), dim_error);
}

TEST_CASE("Adam matches a hand-computed update and polices ownership") {
    TrainSettings ts;
    ts.lr = 0.1;
    AdamOpt<double> opt(ts);
    Mat<double> p(2, 2);
    p << 1.0, -2.0, 0.5, 3.0;
    Mat<double> p0 = p;
    opt.add(p);

    Mat<double> g1(2, 2), g2(2, 2);
    g1 << 0.3, -1.0, 0.0, 2.0;
    g2 << -0.5, 0.25, 1.0, 1.0;

    opt.zero();
    opt.g[0] = g1;
    opt.step();
    opt.zero();
    opt.g[0] = g2;
    opt.step();

    for (int i = 0; i < 4; i++) {
        double m = 0.0, v = 0.0, x = p0.data()[i];
        double gs[2] = {g1.data()[i], g2.data()[i]};
        for (int s = 1; s <= 2; s++) {
            double g = gs[s - 1];
            m = ts.beta1 * m + (1.0 - ts.beta1) * g;
            v = ts.beta2 * v + (1.0 - ts.beta2) * g * g;
            double mh = m / (1.0 - std::pow(ts.beta1, s));
            double vh = v / (1.0 - std::pow(ts.beta2, s));
            x -= ts.lr * mh / (std::sqrt(vh) + ts.adam_eps);
        }
        CHECK(p.data()[i] == Catch::Approx(x).margin(1e-12));
    }

    // gradients for a parameter the optimizer never registered are an error
    Tape<double> tp;
    Mat<double> foreign = Mat<double>::Ones(2, 2);
    auto var = tp.leaf(foreign, true);
    std::vector<std::pair<const Mat<double>*, Tape<double>::Var>> bound{{&foreign, var}};
    CHECK_THROWS_AS(opt.gather(tp, bound), dim_error);
}

TEST_CASE("adapter training validation and no-op settings") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 160);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear();
    std::vector<TrainClip<float>> data{make_clip(md, vae, 161, 0, false),
                                       make_clip(md, vae, 162, 2, false)};

    TrainSettings ts;
    ts.iters = 5;
    ts.lr = 0.0;
    ts.seed = 163;

    // zero learning rate records losses but moves nothing
    Checkpoint ck = Checkpoint::make(md, false, 164, "translate_right");
    std::vector<Mat<float>> snap;
    ck.visit_params([&](const char*, Mat<float>& m) { snap.push_back(m); });
    uint64_t before = base.param_hash();
    TrainResult r = train_miva(base, ck, data, ns, ts);
    CHECK(r.losses.size() == 5);
    for (double l : r.losses) CHECK(std::isfinite(l));
    CHECK(base.param_hash() == before);
    size_t pi = 0;
    ck.visit_params([&](const char*, Mat<float>& m) {
        CHECK((m - snap[pi++]).cwiseAbs().maxCoeff() == 0.0f);
    });

    TrainSettings zero_it = ts;
    zero_it.iters = 0;
    TrainResult r0 = train_miva(base, ck, data, ns, zero_it);
    CHECK(r0.losses.empty());

    Checkpoint masked = Checkpoint::make(md, true, 165, "fall_dots");
    CHECK_THROWS_AS(train_miva(base, masked, data, ns, ts), dim_error);
    CHECK_THROWS_AS(train_miva(base, ck, {}, ns, ts), dim_error);

    ModelDims big = md;
    big.frames = md.frames + 3;  // clips are now too short
    BaseModel base_big = BaseModel::make(big, 166);
    Checkpoint ck_big = Checkpoint::make(big, false, 167, "translate_right");
    CHECK_THROWS_AS(train_miva(base_big, ck_big, data, ns, ts), dim_error);
}

TEST_CASE("adapter training reduces the loss against the frozen-adapter control") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 170);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear();
    std::vector<TrainClip<float>> data{make_clip(md, vae, 171, 0, false),
                                       make_clip(md, vae, 172, 0, false)};

    TrainSettings ts;
    ts.iters = 300;
    ts.seed = 173;

    ts.lr = 0.0;
    Checkpoint control = Checkpoint::make(md, false, 174, "translate_right");
    TrainResult rc = train_miva(base, control, data, ns, ts);

    ts.lr = 1e-3;
    Checkpoint trained = Checkpoint::make(md, false, 174, "translate_right");
    TrainResult rt = train_miva(base, trained, data, ns, ts);

    // identical clip/timestep/noise streams, so the tail gap is pure learning
    CHECK(mean_tail(rt.losses, 100) < mean_tail(rc.losses, 100));
    bool moved = false;
    trained.visit_params([&](const char*, Mat<float>& m) {
        if (m.cwiseAbs().maxCoeff() > 0.0f) moved = true;
    });
    CHECK(moved);
}

TEST_CASE("masked training: joint loss, branch log, dataset validation") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 180);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear();
    std::vector<TrainClip<float>> data{make_clip(md, vae, 181, 0, true),
                                       make_clip(md, vae, 182, 1, true)};

    TrainSettings ts;
    ts.iters = 200;
    ts.seed = 183;

    ts.lr = 0.0;
    Checkpoint control = Checkpoint::make(md, true, 184, "fall_dots");
    TrainResult rc = train_mmiva(base, control, data, ns, vae, ts);
    REQUIRE(rc.losses.size() == 200);
    REQUIRE(rc.gt_branch.size() == 200);
    CHECK(rc.gt_branch[0] == 1);  // ground-truth probability starts at one
    size_t gt_first = 0, gt_last = 0;
    for (size_t i = 0; i < 100; i++) {
        gt_first += rc.gt_branch[i];
        gt_last += rc.gt_branch[100 + i];
    }
    CHECK(gt_first > gt_last);  // cosine decay shifts mass to predicted masks

    ts.lr = 1e-3;
    Checkpoint trained = Checkpoint::make(md, true, 184, "fall_dots");
    TrainResult rt = train_mmiva(base, trained, data, ns, vae, ts);
    CHECK(mean_tail(rt.losses, 80) < mean_tail(rc.losses, 80));

    Checkpoint plain = Checkpoint::make(md, false, 185, "translate_right");
    CHECK_THROWS_AS(train_mmiva(base, plain, data, ns, vae, ts), dim_error);
    std::vector<TrainClip<float>> bare{make_clip(md, vae, 186, 0, false)};
    CHECK_THROWS_AS(train_mmiva(base, trained, bare, ns, vae, ts), dim_error);
}

TEST_CASE("pretraining trains the base and requires prompt patterns") {
    ModelDims md = tiny_dims();
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear();
    std::vector<TrainClip<float>> data{make_clip(md, vae, 190, 0, false, 0),
                                       make_clip(md, vae, 191, 0, false, 1)};

    TrainSettings ts;
    ts.iters = 300;
    ts.seed = 192;

    ts.lr = 0.0;
    BaseModel control = BaseModel::make(md, 193);
    TrainResult rc = pretrain_base(control, data, ns, ts);

    ts.lr = 1e-3;
    BaseModel trained = BaseModel::make(md, 193);
    uint64_t h0 = trained.param_hash();
    TrainResult rt = pretrain_base(trained, data, ns, ts);
    CHECK(trained.param_hash() != h0);
    CHECK(mean_tail(rt.losses, 100) < mean_tail(rc.losses, 100));

    std::vector<TrainClip<float>> unlabeled{make_clip(md, vae, 194, 0, false, -1)};
    CHECK_THROWS_AS(pretrain_base(control, unlabeled, ns, ts), dim_error);
    std::vector<TrainClip<float>> overflow{make_clip(md, vae, 195, 0, false, md.max_patterns)};
    CHECK_THROWS_AS(pretrain_base(control, overflow, ns, ts), dim_error);
}

TEST_CASE("analytic adapter gradients match central finite differences") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 200);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear();

    Checkpoint ck = Checkpoint::make(md, false, 201, "translate_right");
    TrainClip<float> clip = make_clip(md, vae, 202, 0, false);
    GradCheckReport rep = gradient_check_adapter(base, ck, clip, ns, 203);
    INFO(rep.summary());
    CHECK(rep.worst < 1e-4);
    CHECK(rep.pass());

    // masked joint loss, ground-truth bias branch
    Checkpoint mck = Checkpoint::make(md, true, 204, "fall_dots");
    TrainClip<float> mclip = make_clip(md, vae, 205, 0, true);
    GradCheckReport mrep = gradient_check_adapter(base, mck, mclip, ns, 206);
    INFO(mrep.summary());
    CHECK(mrep.worst < 1e-4);
}

TEST_CASE("analytic base gradients match central finite differences") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 210);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    TrainClip<float> clip = make_clip(md, vae, 211, 0, false, 1);
    GradCheckReport rep = gradient_check_base(base, clip, NoiseSchedule::linear(), 212);
    INFO(rep.summary());
    CHECK(rep.worst < 1e-4);
}
