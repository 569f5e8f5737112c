// Command-line surface for corpus generation, teacher training, the
// three-stage distillation pipeline, projection benchmarks, training-law
// sweeps, evaluation and gradient checks. All randomness is keyed by --seed;
// reruns with identical inputs produce byte-identical outputs.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mohawk/checkpoint.hpp"
#include "mohawk/config.hpp"
#include "mohawk/corpus.hpp"
#include "mohawk/csv.hpp"
#include "mohawk/distill.hpp"
#include "mohawk/gradsuite.hpp"
#include "mohawk/model.hpp"
#include "mohawk/train.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace mohawk;

namespace fs = std::filesystem;

struct CommonArgs {
    std::string config_path;
    std::optional<u64> seed;
    int jobs = 1;
    std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* copt = cmd->add_option("--config", args.config_path, "run configuration file");
    if (config_required) copt->required();
    cmd->add_option("--seed", args.seed, "override every seed in the config");
    cmd->add_option("--jobs", args.jobs, "worker threads for independent work items")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--out", args.out_dir, "output directory");
}

std::string out_path(const CommonArgs& args, const std::string& name) {
    fs::create_directories(args.out_dir);
    return (fs::path(args.out_dir) / name).string();
}

config::RunConfig load_config(const CommonArgs& args) {
    config::RunConfig rc = config::load_run_config(args.config_path);
    if (args.seed) {
        rc.teacher.seed = *args.seed;
        rc.distill_cfg.seed = *args.seed;
        rc.approx_cfg.gd.seed = *args.seed;
        rc.sweep_cfg.sweep.seeds = {*args.seed};
    }
    return rc;
}

void write_metric_rows(const std::string& path, const std::vector<distill::MetricRow>& rows) {
    io::CsvWriter csv({"stage", "tokens", "metric", "value"});
    for (const auto& row : rows) {
        csv.append_row({row.stage, io::csv_int(row.tokens), "stage1_dist",
                        io::csv_double(row.metrics.stage1_dist)});
        csv.append_row({row.stage, io::csv_int(row.tokens), "stage2_dist",
                        io::csv_double(row.metrics.stage2_dist)});
        csv.append_row({row.stage, io::csv_int(row.tokens), "kd_loss",
                        io::csv_double(row.metrics.kd_loss)});
        csv.append_row({row.stage, io::csv_int(row.tokens), "heldout_ppl",
                        io::csv_double(row.metrics.heldout_ppl)});
    }
    csv.save(path);
}

int cmd_gen_corpus(u64 seed, i64 size, const std::string& out_file) {
    corpus::GrammarSpec g;
    std::vector<uint16_t> tokens = corpus::generate(seed, size, g);
    corpus::write_tokens(out_file, tokens);
    std::printf("wrote %lld tokens to %s\n", static_cast<long long>(size), out_file.c_str());
    std::printf("analytic unigram perplexity %s (entropy %s nats)\n",
                io::csv_double(corpus::analytic_unigram_perplexity(g)).c_str(),
                io::csv_double(corpus::analytic_unigram_entropy(g)).c_str());
    return 0;
}

int cmd_train_teacher(const CommonArgs& args) {
    config::RunConfig rc = load_config(args);
    check_input(!rc.teacher_corpus.empty(), "train-teacher: [teacher_training] corpus required");
    std::vector<uint16_t> tokens = corpus::read_tokens(rc.teacher_corpus);
    model::TeacherTrainConfig tc = rc.teacher;
    tc.jobs = args.jobs;
    std::vector<model::MetricPoint> history;
    model::Model teacher = model::train_teacher(rc.model_cfg, tokens, tc, &history);
    distill::save_model(out_path(args, "teacher.mhwk"), teacher);

    io::CsvWriter csv({"step", "tokens", "train_loss", "heldout_ce", "heldout_ppl"});
    for (const auto& p : history)
        csv.append_row({io::csv_int(p.step), io::csv_int(p.tokens), io::csv_double(p.train_loss),
                        io::csv_double(p.heldout_ce), io::csv_double(p.heldout_ppl)});
    csv.save(out_path(args, "teacher_metrics.csv"));

    model::SplitCorpus split = model::split_corpus(tokens, tc.heldout_frac);
    std::vector<uint16_t> train(tokens.begin(), tokens.begin() + split.train_end);
    std::vector<uint16_t> held(tokens.begin() + split.train_end, tokens.end());
    double baseline = corpus::unigram_baseline_perplexity(train, held, rc.model_cfg.vocab_size);
    double ppl = history.empty() ? 0.0 : history.back().heldout_ppl;
    std::printf("teacher held-out ppl %s vs unigram baseline %s\n", io::csv_double(ppl).c_str(),
                io::csv_double(baseline).c_str());
    return 0;
}

int cmd_distill(const CommonArgs& args) {
    config::RunConfig rc = load_config(args);
    check_input(!rc.distill_corpus.empty(), "distill: [distill] corpus required");
    check_input(!rc.distill_teacher_checkpoint.empty(),
                "distill: [distill] teacher_checkpoint required");
    std::vector<uint16_t> tokens = corpus::read_tokens(rc.distill_corpus);
    model::Model teacher = distill::load_model(rc.distill_teacher_checkpoint);
    distill::DistillConfig cfg = rc.distill_cfg;
    cfg.jobs = args.jobs;
    distill::MohawkResult res = distill::run_mohawk(cfg, teacher, tokens);
    distill::save_model(out_path(args, "student.mhwk"), res.student);
    write_metric_rows(out_path(args, "metrics.csv"), res.metrics);
    std::printf("final: stage1_dist %s stage2_dist %s kd_loss %s heldout_ppl %s\n",
                io::csv_double(res.final_metrics.stage1_dist).c_str(),
                io::csv_double(res.final_metrics.stage2_dist).c_str(),
                io::csv_double(res.final_metrics.kd_loss).c_str(),
                io::csv_double(res.final_metrics.heldout_ppl).c_str());
    return 0;
}

int cmd_approx_bench(const CommonArgs& args) {
    config::RunConfig rc = load_config(args);
    const config::ApproxSettings& a = rc.approx_cfg;
    std::vector<Tensor> targets;
    if (!a.matrices.empty()) {
        auto arrays = io::read_container(a.matrices);
        const Tensor& attn = io::require_array(arrays, "attn");
        check_input(attn.rank() == 3 && attn.dim(1) == attn.dim(2),
                    "approx-bench: 'attn' must have shape (num_samples, T, T)");
        for (i64 s = 0; s < attn.dim(0); ++s) {
            Tensor m({attn.dim(1), attn.dim(2)});
            for (i64 i = 0; i < m.size(); ++i) m[i] = attn[s * m.size() + i];
            targets.push_back(std::move(m));
        }
    } else {
        check_input(!a.teacher_checkpoint.empty() && !a.corpus.empty(),
                    "approx-bench: need either matrices= or teacher_checkpoint= plus corpus=");
        model::Model teacher = distill::load_model(a.teacher_checkpoint);
        std::vector<uint16_t> tokens = corpus::read_tokens(a.corpus);
        targets = distill::capture_attention_matrices(teacher, tokens, a.num_matrices, a.seq_len,
                                                      0.05, a.gd.seed);
    }
    std::vector<approx::BenchRow> rows =
        approx::approx_benchmark(targets, a.families, a.state_sizes, a.gd, args.jobs);
    io::CsvWriter csv({"family", "state_size", "mean_distance", "num_samples", "seq_len"});
    for (const auto& r : rows)
        csv.append_row({approx::family_name(r.family),
                        r.family == approx::Family::Toeplitz ? "" : io::csv_int(r.state_size),
                        io::csv_double(r.mean_distance), io::csv_int(r.num_samples),
                        io::csv_int(r.seq_len)});
    csv.save(out_path(args, "approx_bench.csv"));
    std::printf("%zu benchmark rows written\n", rows.size());
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    config::RunConfig rc = load_config(args);
    check_input(!rc.distill_corpus.empty() && !rc.distill_teacher_checkpoint.empty(),
                "sweep: [distill] corpus and teacher_checkpoint required");
    check_input(!rc.sweep_cfg.sweep.stage_b_budgets.empty(),
                "sweep: [sweep] stage_b_budgets required");
    std::vector<uint16_t> tokens = corpus::read_tokens(rc.distill_corpus);
    model::Model teacher = distill::load_model(rc.distill_teacher_checkpoint);
    distill::DistillConfig cfg = rc.distill_cfg;
    cfg.jobs = args.jobs;
    std::vector<distill::SweepRow> rows =
        distill::training_law_sweep(rc.sweep_cfg.sweep, cfg, teacher, tokens);
    io::CsvWriter csv({"stageA_tokens", "stageB_tokens", "seed", "stage1_dist", "stage2_dist",
                       "kd_loss", "heldout_ppl"});
    for (const auto& r : rows)
        csv.append_row({io::csv_int(r.stage_a_tokens), io::csv_int(r.stage_b_tokens),
                        std::to_string(r.seed), io::csv_double(r.metrics.stage1_dist),
                        io::csv_double(r.metrics.stage2_dist), io::csv_double(r.metrics.kd_loss),
                        io::csv_double(r.metrics.heldout_ppl)});
    csv.save(out_path(args, "sweep.csv"));
    std::printf("%zu sweep rows written\n", rows.size());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& teacher_path,
             const std::string& corpus_path, const CommonArgs& args, i64 seq_len,
             i64 eval_sequences) {
    model::Model student = distill::load_model(checkpoint);
    model::Model teacher = distill::load_model(teacher_path);
    std::vector<uint16_t> tokens = corpus::read_tokens(corpus_path);
    distill::DistillConfig cfg;
    cfg.seq_len = seq_len > 0 ? seq_len : student.cfg.max_seq_len;
    cfg.eval_sequences = eval_sequences;
    model::SplitCorpus split = model::split_corpus(tokens, cfg.heldout_frac);
    distill::MetricDetail detail;
    distill::StageMetrics m = distill::measure_metrics(teacher, student, split, cfg, &detail);

    io::CsvWriter csv({"metric", "layer", "value"});
    csv.append_row({"heldout_ppl", "", io::csv_double(m.heldout_ppl)});
    csv.append_row({"kd_loss", "", io::csv_double(m.kd_loss)});
    csv.append_row({"stage1_dist", "", io::csv_double(m.stage1_dist)});
    csv.append_row({"stage2_dist", "", io::csv_double(m.stage2_dist)});
    for (size_t l = 0; l < detail.stage1_per_layer.size(); ++l) {
        csv.append_row({"stage1_dist", io::csv_int(static_cast<i64>(l)),
                        io::csv_double(detail.stage1_per_layer[l])});
        csv.append_row({"stage2_dist", io::csv_int(static_cast<i64>(l)),
                        io::csv_double(detail.stage2_per_layer[l])});
    }
    csv.save(out_path(args, "eval.csv"));
    std::printf("heldout_ppl %s kd_loss %s stage1_dist %s stage2_dist %s\n",
                io::csv_double(m.heldout_ppl).c_str(), io::csv_double(m.kd_loss).c_str(),
                io::csv_double(m.stage1_dist).c_str(), io::csv_double(m.stage2_dist).c_str());
    return 0;
}

int cmd_gradcheck(const CommonArgs& args, int instances) {
    if (!args.config_path.empty()) config::load_run_config(args.config_path);  // validate only
    u64 seed = args.seed.value_or(0);
    std::vector<gradsuite::CheckResult> results = gradsuite::run_all(instances, seed);
    io::CsvWriter csv({"check", "instances", "max_rel_err", "tolerance", "status"});
    bool all_pass = true;
    for (const auto& r : results) {
        csv.append_row({r.name, io::csv_int(r.instances), io::csv_double(r.max_rel_err),
                        io::csv_double(r.tolerance), r.pass ? "pass" : "fail"});
        std::printf("%-28s %2d instances  max_rel_err %-12.3e %s\n", r.name.c_str(), r.instances,
                    r.max_rel_err, r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    csv.save(out_path(args, "gradcheck.csv"));
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    openblas_set_num_threads(1);  // determinism; --jobs controls parallelism
    CLI::App app{"three-stage transformer-to-ssm distillation toolkit"};
    app.require_subcommand(1);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic token corpus");
    u64 gen_seed = 0;
    i64 gen_size = 0;
    std::string gen_out;
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--size", gen_size, "number of tokens")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output token file")->required();

    CommonArgs train_args, distill_args, bench_args, sweep_args, grad_args, eval_args;
    auto* train = app.add_subcommand("train-teacher", "pretrain the attention teacher");
    add_common(train, train_args);
    auto* dist = app.add_subcommand("distill", "run the three-stage distillation pipeline");
    add_common(dist, distill_args);
    auto* bench = app.add_subcommand("approx-bench", "attention-matrix projection benchmark");
    add_common(bench, bench_args);
    auto* sweep = app.add_subcommand("sweep", "training-law budget sweep");
    add_common(sweep, sweep_args);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a reference teacher");
    std::string eval_ckpt, eval_teacher, eval_corpus;
    i64 eval_seq_len = 0, eval_sequences = 8;
    eval->add_option("--checkpoint", eval_ckpt, "student or teacher checkpoint")->required();
    eval->add_option("--teacher", eval_teacher, "reference teacher checkpoint")->required();
    eval->add_option("--corpus", eval_corpus, "token file")->required();
    eval->add_option("--seq-len", eval_seq_len, "evaluation sequence length");
    eval->add_option("--eval-sequences", eval_sequences, "held-out windows to average");
    eval->add_option("--out", eval_args.out_dir, "output directory");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference checks for every loss");
    int grad_instances = 5;
    add_common(grad, grad_args, false);
    grad->add_option("--instances", grad_instances, "random instances per check")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_corpus(gen_seed, gen_size, gen_out);
        if (train->parsed()) return cmd_train_teacher(train_args);
        if (dist->parsed()) return cmd_distill(distill_args);
        if (bench->parsed()) return cmd_approx_bench(bench_args);
        if (sweep->parsed()) return cmd_sweep(sweep_args);
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_teacher, eval_corpus, eval_args, eval_seq_len,
                            eval_sequences);
        if (grad->parsed()) return cmd_gradcheck(grad_args, grad_instances);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const mohawk::ParseError& e) {
        std::fprintf(stderr, "error: kind=parse msg=\"%s\"\n", e.what());
        return 2;
    } catch (const mohawk::ContractError& e) {
        std::fprintf(stderr, "error: kind=contract msg=\"%s\"\n", e.what());
        return 3;
    } catch (const mohawk::IoError& e) {
        std::fprintf(stderr, "error: kind=io msg=\"%s\"\n", e.what());
        return 4;
    } catch (const mohawk::TrainingFailureError& e) {
        std::fprintf(stderr, "error: kind=training-failure msg=\"%s\"\n", e.what());
        return 5;
    } catch (const mohawk::OptimizationFailureError& e) {
        std::fprintf(stderr, "error: kind=optimization-failure msg=\"%s\"\n", e.what());
        return 5;
    } catch (const mohawk::InvalidInputError& e) {
        std::fprintf(stderr, "error: kind=invalid-input msg=\"%s\"\n", e.what());
        return 6;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: kind=internal msg=\"%s\"\n", e.what());
        return 1;
    }
    return 0;
}
