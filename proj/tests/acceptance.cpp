// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion 8 needs the CLI binary path as argv[1].

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cobalt/pipeline.hpp"

using namespace cobalt;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << criterion << ": " << detail
              << std::endl;
    if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient suite on random stage-1 instances
// ---------------------------------------------------------------------------

struct GradInstance {
    Stage1Model model;
    TensorPtr x_s, x_t;
    std::vector<int> overlap;
};

GradInstance make_instance(std::uint64_t seed) {
    GradInstance inst;
    Stage1Config cfg;
    cfg.n_slots = 3;
    cfg.codebook_size = 4;
    cfg.dim = 6;
    cfg.width = 8;
    cfg.proj_hidden = 12;
    inst.model = init_stage1_model(cfg, /*patch_dim=*/10, seed);
    Rng rng(derive_seed(seed, "grad_instance"));
    // teacher a small perturbation of the student, as after a few EMA steps
    for (auto& t : inst.model.teacher.tensors())
        for (auto& v : t->values) v += rng.normal(0.0, 0.02);
    const int P = 8;
    inst.x_s = make_tensor({P, 10});
    inst.x_t = make_tensor({P, 10});
    for (auto& v : inst.x_s->values) v = rng.uniform(-1.0, 1.0);
    for (auto& v : inst.x_t->values) v = rng.uniform(-1.0, 1.0);
    inst.overlap.assign(P, -1);
    for (int i = 0; i < 6; ++i) inst.overlap[static_cast<std::size_t>(i)] = i; // partial overlap
    return inst;
}

bool criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst[4] = {0, 0, 0, 0};
    bool teacher_zero = true;
    for (int k = 0; k < 20; ++k) {
        auto inst = make_instance(1000 + static_cast<std::uint64_t>(k));
        auto params = inst.model.trainable();
        enum { DIS, CON, VQ, TOTAL };
        for (int which : {DIS, CON, VQ, TOTAL}) {
            auto build = [&](Tape& tape) -> TensorPtr {
                auto parts = stage1_sample_loss_from_patches(&tape, inst.model, inst.x_s, inst.x_t,
                                                             inst.overlap);
                switch (which) {
                    case DIS: return parts.l_dis;
                    case CON: return parts.l_con;
                    case VQ: return parts.l_vq;
                    default: return parts.total;
                }
            };
            worst[which] = std::max(worst[which], grad_check(build, params, 1e-5));
        }
        // teacher parameters and codebook collect exactly zero gradient
        for (auto& t : inst.model.teacher.tensors()) {
            t->requires_grad = true;
            t->ensure_grad();
        }
        inst.model.dict.codes->requires_grad = true;
        inst.model.dict.codes->ensure_grad();
        Tape tape;
        auto parts = stage1_sample_loss_from_patches(&tape, inst.model, inst.x_s, inst.x_t, inst.overlap);
        tape.backward(parts.total);
        for (auto& t : inst.model.teacher.tensors())
            for (double g : t->grad) teacher_zero = teacher_zero && g == 0.0;
        for (double g : inst.model.dict.codes->grad) teacher_zero = teacher_zero && g == 0.0;
    }
    const double elapsed = seconds_since(t0);
    const double overall = std::max({worst[0], worst[1], worst[2], worst[3]});
    std::ostringstream os;
    os << "gradient suite: max rel err l_dis " << worst[0] << ", l_con " << worst[1] << ", l_vq "
       << worst[2] << ", total " << worst[3] << "; teacher/codebook grads zero: "
       << (teacher_zero ? "yes" : "NO") << "; " << elapsed << " s";
    const bool pass = overall <= 1e-4 && teacher_zero && elapsed <= 120.0;
    report(1, pass, os.str());
    return pass;
}

// ---------------------------------------------------------------------------
// Criterion 2: sampler oracle on the fixture table
// ---------------------------------------------------------------------------

bool criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<AssignmentRecord> recs;
    std::uint32_t id = 0;
    auto add = [&](int concept_id, int cls, int count) {
        for (int i = 0; i < count; ++i) {
            AssignmentRecord r;
            r.sample_id = id++;
            r.class_label = cls;
            r.concepts = {concept_id};
            r.mass = {1.0};
            recs.push_back(std::move(r));
        }
    };
    add(1, 0, 90);
    add(1, 1, 10);
    add(2, 0, 50);
    add(2, 1, 50);
    auto table = build_cluster_table(recs);

    auto l1_for = [&](double lambda, double p10) {
        Rng rng(20240 + static_cast<std::uint64_t>(lambda * 10));
        auto batch = draw_batch(table, 100000, lambda, rng);
        std::map<std::pair<int, int>, double> freq;
        for (auto sid : batch) {
            const int cluster = sid < 100 ? 1 : 2;
            const int cls = sid < 100 ? (sid < 90 ? 0 : 1) : (sid < 150 ? 0 : 1);
            freq[{cluster, cls}] += 1e-5;
        }
        const std::map<std::pair<int, int>, double> target = {
            {{1, 0}, 0.5 * p10}, {{1, 1}, 0.5 * (1 - p10)}, {{2, 0}, 0.25}, {{2, 1}, 0.25}};
        double l1 = 0.0;
        for (const auto& [key, p] : target) l1 += std::abs(freq[key] - p);
        return l1;
    };
    const double l1_lambda1 = l1_for(1.0, 0.1);          // (0.1, 0.9) per cluster 1
    const double l1_lambda2 = l1_for(2.0, 1.0 / 82.0);   // (1/82, 81/82)
    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << "sampler oracle: L1 at lambda=1 " << l1_lambda1 << ", lambda=2 " << l1_lambda2 << "; "
       << elapsed << " s";
    const bool pass = l1_lambda1 <= 0.01 && l1_lambda2 <= 0.01 && elapsed <= 10.0;
    report(2, pass, os.str());
    return pass;
}

// ---------------------------------------------------------------------------
// Criterion 3: silhouette vs brute force, lambda thresholds
// ---------------------------------------------------------------------------

double silhouette_bruteforce(const std::vector<std::vector<double>>& pts, const std::vector<int>& ids) {
    const std::size_t n = pts.size();
    auto dist = [&](std::size_t i, std::size_t j) {
        double s = 0;
        for (std::size_t k = 0; k < pts[i].size(); ++k) s += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
        return std::sqrt(s);
    };
    std::set<int> labels(ids.begin(), ids.end());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t own = 0;
        double a_sum = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (ids[j] == ids[i]) {
                own++;
                if (j != i) a_sum += dist(i, j);
            }
        if (own == 1) continue;
        const double a = a_sum / static_cast<double>(own - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int other : labels) {
            if (other == ids[i]) continue;
            double s = 0;
            std::size_t cnt = 0;
            for (std::size_t j = 0; j < n; ++j)
                if (ids[j] == other) {
                    s += dist(i, j);
                    cnt++;
                }
            b = std::min(b, s / static_cast<double>(cnt));
        }
        if (std::max(a, b) > 0) total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

bool criterion3() {
    Rng rng(33033);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const int n = rng.uniform_int(10, 200);
        const int k = rng.uniform_int(2, 5);
        const int dim = rng.uniform_int(1, 4);
        std::vector<std::vector<double>> pts;
        std::vector<int> ids;
        for (int i = 0; i < n; ++i) {
            const int c = i < k ? i : rng.uniform_int(0, k - 1);
            std::vector<double> p(static_cast<std::size_t>(dim));
            for (auto& v : p) v = rng.normal(2.0 * c, 1.0);
            pts.push_back(std::move(p));
            ids.push_back(c);
        }
        worst = std::max(worst, std::abs(silhouette(pts, ids) - silhouette_bruteforce(pts, ids)));
    }
    const bool lambda_ok = select_lambda(0.8) == 2.0 && select_lambda(0.9) == 1.0;
    std::ostringstream os;
    os << "silhouette oracle: max |diff| " << worst << "; lambda(0.8)=2 and lambda(0.9)=1: "
       << (lambda_ok ? "yes" : "NO");
    const bool pass = worst <= 1e-9 && lambda_ok;
    report(3, pass, os.str());
    return pass;
}

// ---------------------------------------------------------------------------
// Criterion 4: attention/assignment invariants over random forwards
// ---------------------------------------------------------------------------

bool criterion4() {
    Rng rng(44044);
    double worst_col = 0.0, worst_ps = 0.0;
    bool argmax_ok = true;
    for (int rep = 0; rep < 100; ++rep) {
        const int N = rng.uniform_int(1, 6), P = rng.uniform_int(1, 12), d = rng.uniform_int(2, 8);
        const int K = rng.uniform_int(1, 8);
        auto S = make_tensor({N, d});
        auto y = make_tensor({P, d});
        for (auto& v : S->values) v = rng.normal();
        for (auto& v : y->values) v = rng.normal();
        auto A = slot_attention(nullptr, S, y, rng.uniform(0.05, 1.0));
        for (int j = 0; j < P; ++j) {
            double s = 0;
            for (int i = 0; i < N; ++i) s += A->at(i, j);
            worst_col = std::max(worst_col, std::abs(s - 1.0));
        }
        ConceptDictionary dict;
        dict.K = K;
        dict.dim = d;
        dict.codes = make_tensor({K, d});
        for (auto& v : dict.codes->values) v = rng.normal();
        dict.usage.assign(static_cast<std::size_t>(K), 0);
        auto z = make_tensor({N, d});
        for (auto& v : z->values) v = rng.normal();
        auto p_s = assign_student(nullptr, z, dict, rng.uniform(0.05, 1.0));
        for (int j = 0; j < N; ++j) {
            double s = 0;
            for (int i = 0; i < K; ++i) s += p_s->at(i, j);
            worst_ps = std::max(worst_ps, std::abs(s - 1.0));
        }
        auto hard = assign_teacher(*z, dict);
        for (int j = 0; j < N; ++j) {
            int best = 0;
            for (int i = 1; i < K; ++i)
                if (p_s->at(i, j) > p_s->at(best, j)) best = i;
            argmax_ok = argmax_ok && best == hard[static_cast<std::size_t>(j)];
        }
    }
    std::ostringstream os;
    os << "attention/assignment invariants: max |col sum - 1| " << worst_col << " (tol 1e-6), max "
       << "|p_s sum - 1| " << worst_ps << " (tol 1e-9), teacher argmax matches: "
       << (argmax_ok ? "yes" : "NO");
    const bool pass = worst_col <= 1e-6 && worst_ps <= 1e-9 && argmax_ok;
    report(4, pass, os.str());
    return pass;
}

// ---------------------------------------------------------------------------
// Criterion 5: codebook EMA single-assignment example
// ---------------------------------------------------------------------------

bool criterion5() {
    ConceptDictionary dict;
    dict.K = 2;
    dict.dim = 2;
    dict.alpha_c = 0.9;
    dict.codes = make_tensor({2, 2}, {1.0, 0.0, -3.25, 7.5});
    dict.usage.assign(2, 0);
    const std::vector<double> before{dict.codes->at(1, 0), dict.codes->at(1, 1)};
    TeacherBatch batch;
    batch.slots = {{0.0, 1.0}};
    batch.assignments = {0};
    batch.active = {true};
    update_codebook(dict, batch);
    const bool updated = dict.codes->at(0, 0) == 0.9 && dict.codes->at(0, 1) == 0.1;
    const bool untouched = dict.codes->at(1, 0) == before[0] && dict.codes->at(1, 1) == before[1];
    std::ostringstream os;
    os << "codebook EMA: C_0 = (" << dict.codes->at(0, 0) << ", " << dict.codes->at(0, 1)
       << ") expected (0.9, 0.1); unassigned code bitwise unchanged: " << (untouched ? "yes" : "NO");
    report(5, updated && untouched, os.str());
    return updated && untouched;
}

// ---------------------------------------------------------------------------
// Criteria 6-8 share the end-to-end configuration
// ---------------------------------------------------------------------------

TrainConfig acceptance_config() {
    TrainConfig cfg;
    cfg.dataset.n_classes = 5;
    cfg.dataset.n_colors = 5;
    cfg.dataset.rho = 0.995;
    cfg.dataset.n_train = 10000;
    cfg.dataset.n_val = 1000;
    cfg.dataset.n_test = 2500;
    cfg.dataset.image_size = 32;
    cfg.dataset.patch_size = 4;
    cfg.dataset.seed = 1;
    cfg.stage1.n_slots = 4;
    cfg.stage1.codebook_size = 8;
    cfg.stage1.dim = 6;
    cfg.stage1.width = 64;
    cfg.stage1.proj_hidden = 64;
    cfg.stage1.epochs = 10;
    cfg.stage1.batch_size = 32;
    cfg.stage1.lr = 0.02;
    cfg.stage1.augment = false; // templated-digit analogue: period 20
    cfg.stage2.hidden = 64;
    cfg.stage2.epochs = 20;
    cfg.stage2.batch_size = 32;
    cfg.stage2.lr = 0.01;
    cfg.stage2.weight_decay = 1e-4;
    cfg.stage2.early_stop = "avg";
    cfg.stage2.min_group_size = 10;
    cfg.seed = 1;
    return cfg;
}

bool criterion6(const fs::path& scratch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = acceptance_config();
    auto ds = generate_dataset(cfg.dataset);
    auto test_groups = ground_truth_grouping(ds.test);

    double sum_gap = 0.0, sum_cobalt_avg = 0.0, sum_iid_avg = 0.0;
    std::ostringstream detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        cfg.seed = seed;
        const auto run = scratch / strcat("e2e_seed", seed);
        fs::remove_all(run);
        train_stage1(cfg, ds, run);
        cfg.stage2.sampler = "cobalt";
        auto cob = train_stage2(cfg, ds, run);
        auto cob_ev = evaluate_split(cob.classifier, ds.test, test_groups, cfg.stage2.min_group_size);
        cfg.stage2.sampler = "iid";
        auto iid = train_stage2(cfg, ds, run);
        auto iid_ev = evaluate_split(iid.classifier, ds.test, test_groups, cfg.stage2.min_group_size);
        sum_gap += cob_ev.worst - iid_ev.worst;
        sum_cobalt_avg += cob_ev.average;
        sum_iid_avg += iid_ev.average;
        detail << " [seed " << seed << ": worst " << cob_ev.worst << " vs " << iid_ev.worst
               << ", avg " << cob_ev.average << " vs " << iid_ev.average << "]";
    }
    const double mean_gap = 100.0 * sum_gap / 3.0;             // percentage points
    const double mean_cobalt_avg = 100.0 * sum_cobalt_avg / 3.0;
    const double mean_iid_avg = 100.0 * sum_iid_avg / 3.0;
    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << "directional check: mean worst-group gap " << mean_gap << " pts (need >= 20); cobalt avg "
       << mean_cobalt_avg << " vs iid " << mean_iid_avg << " (need cobalt >= iid - 10);"
       << detail.str() << "; " << elapsed << " s (limit 1200)";
    const bool pass = mean_gap >= 20.0 && mean_cobalt_avg >= mean_iid_avg - 10.0 && elapsed <= 1200.0;
    report(6, pass, os.str());
    return pass;
}

bool criterion7(const fs::path& scratch) {
    auto cfg = acceptance_config();
    cfg.dataset.n_train = 500;
    cfg.dataset.n_val = 100;
    cfg.dataset.n_test = 100;
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 2;
    cfg.stage2.min_group_size = 2;
    auto ds = generate_dataset(cfg.dataset);

    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        std::ostringstream os;
        os << is.rdbuf();
        return os.str();
    };
    std::vector<std::string> payloads;
    for (int rep = 0; rep < 2; ++rep) {
        const auto run = scratch / strcat("det_rep", rep);
        fs::remove_all(run);
        train_stage1(cfg, ds, run);
        cfg.stage2.sampler = "cobalt";
        train_stage2(cfg, ds, run);
        payloads.push_back(slurp(paths::stage1_metrics(run)) + "\x1f" +
                           slurp(paths::assignments(run, "train")) + "\x1f" +
                           slurp(paths::stage2_dir(run, "cobalt", "avg") / "metrics.ndjson"));
    }
    const bool pass = !payloads[0].empty() && payloads[0] == payloads[1];
    report(7, pass, strcat("determinism: two identical runs produce byte-identical metrics "
                           "files: ", pass ? "yes" : "NO"));
    return pass;
}

bool criterion8(const fs::path& scratch, const std::string& cli) {
    // non-collapse half: rerun a small slice of the default configuration and
    // check the sentinel count from its metrics
    auto cfg = acceptance_config();
    const auto run = scratch / "e2e_seed1"; // reuse criterion 6's artifacts
    int codes_in_use = -1;
    {
        std::ifstream is(paths::stage1_metrics(run));
        std::string line, last;
        while (std::getline(is, line))
            if (!line.empty()) last = line;
        if (!last.empty()) codes_in_use = nlohmann::json::parse(last).value("codes_in_use", -1);
    }

    // abort half: a deliberately degenerate config must exit with code 3
    const auto dir = scratch / "degenerate";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        nlohmann::json j;
        j["dataset"] = {{"n_classes", 1}, {"n_colors", 1}, {"rho", 1.0},      {"n_train", 300},
                        {"n_val", 50},    {"n_test", 50},  {"image_size", 32}, {"patch_size", 4},
                        {"seed", 1}};
        j["stage1"] = {{"n_slots", 4}, {"codebook_size", 8}, {"dim", 6},    {"width", 64},
                       {"proj_hidden", 64}, {"epochs", 5},   {"batch_size", 32}, {"lr", 0.02},
                       {"alpha_t", 0.0},    {"tau_t", 10.0}, {"augment", false}};
        j["seed"] = 1;
        std::ofstream os(dir / "config.json");
        os << j.dump(2);
    }
    int gen_code = -1, discover_code = -1;
    {
        const std::string base = cli + " --config " + (dir / "config.json").string() + " --out " +
                                 (dir / "run").string();
        gen_code = WEXITSTATUS(std::system((base + " gen > /dev/null 2>&1").c_str()));
        discover_code = WEXITSTATUS(std::system((base + " discover > /dev/null 2>&1").c_str()));
    }
    std::ostringstream os;
    os << "collapse sentinel: default-run codes in use " << codes_in_use
       << " (need >= 2); degenerate config (alpha_t=0, tau_t=10) exit code " << discover_code
       << " (need 3)";
    const bool pass = codes_in_use >= 2 && gen_code == 0 && discover_code == 3;
    report(8, pass, os.str());
    return pass;
}

} // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    const auto scratch = fs::temp_directory_path() / "cobalt_acceptance";
    fs::create_directories(scratch);

    criterion1();
    criterion2();
    criterion3();
    criterion4();
    criterion5();
    criterion6(scratch);
    criterion7(scratch);
    if (cli.empty()) {
        report(8, false, "collapse sentinel: CLI binary path not supplied (argv[1])");
    } else {
        criterion8(scratch, cli);
    }

    std::cout << (g_failures == 0 ? "acceptance: all criteria passed"
                                  : strcat("acceptance: ", g_failures, " criterion(s) failed"))
              << std::endl;
    return g_failures == 0 ? 0 : 1;
}
