"""Message-free straight-line recomputation of VFLGAN training.

Re-derives the same child streams as the protocol engine and performs the
whole computation inline with nn primitives only: no Party/Server objects,
no protocol messages. Used as the independent oracle for the
protocol-vs-monolith equivalence tests. Gradient accumulation order mirrors
the engine exactly so agreement is bitwise.
"""

import numpy as np

from vfsynth import nn
from vfsynth.fedgan import OutputHead, PartitionedData


class MonolithVflgan:
    def __init__(self, parts: PartitionedData, cfg, rng):
        self.cfg = cfg
        self.views = list(parts.views)
        self.m = len(self.views)
        self.heads = [
            OutputHead(b, cfg.gumbel_temperature, cfg.numeric_activation)
            for b in parts.blocks
        ]
        self.g, self.d1, self.d2 = [], [], []
        self.adam_g, self.adam_d1, self.adam_d2 = [], [], []
        for i in range(self.m):
            width = self.views[i].shape[1]
            g = nn.init_mlp(
                [cfg.latent_dim, *cfg.gen_hidden, width], rng.child("init", "g", i)
            )
            d1 = nn.init_mlp(
                [width, *cfg.disc_part1_hidden, cfg.feature_dim],
                rng.child("init", "d1", i),
                out_activation="leaky_relu",
            )
            d2 = nn.init_mlp(
                [cfg.feature_dim, *cfg.disc_part2_hidden, 1],
                rng.child("init", "d2", i),
            )
            self.g.append(g)
            self.d1.append(d1)
            self.d2.append(d2)
            self.adam_g.append(nn.AdamState.for_mlp(g))
            self.adam_d1.append(nn.AdamState.for_mlp(d1))
            self.adam_d2.append(nn.AdamState.for_mlp(d2))
        self.ds = nn.init_mlp(
            [cfg.feature_dim * self.m, *cfg.server_hidden, 1], rng.child("init", "ds")
        )
        self.adam_ds = nn.AdamState.for_mlp(self.ds)
        self.gumbel = [rng.child("gumbel", i) for i in range(self.m)]
        self.beta = [rng.child("beta", i) for i in range(self.m)]
        self.beta_server = rng.child("beta_server")
        self.batch = rng.child("batch")
        self.z = rng.child("z")
        self.n = self.views[0].shape[0]

    def _feature_slices(self):
        w = self.cfg.feature_dim
        return [slice(i * w, (i + 1) * w) for i in range(self.m)]

    def run_epoch(self):
        cfg = self.cfg
        b = cfg.batch_size
        for _ in range(cfg.disc_steps):
            idx = self.batch.subsample(self.n, b)
            z = self.z.normal(b, cfg.latent_dim)
            xs, xts = [], []
            local = []
            f_parts, ft_parts, tapes_fr, tapes_fs = [], [], [], []
            for i in range(self.m):
                x = self.views[i][idx]
                logits, _ = nn.forward(self.g[i], z)
                xt = self.heads[i].forward(logits, self.gumbel[i])
                xs.append(x)
                xts.append(xt)
                critic = nn.stack(self.d1[i], self.d2[i])
                out_r, tape_r = nn.forward(critic, x)
                out_s, tape_s = nn.forward(critic, xt)
                grads_r, _ = nn.backward(critic, tape_r, np.full_like(out_r, -1.0 / b))
                grads_s, _ = nn.backward(critic, tape_s, np.full_like(out_s, 1.0 / b))
                x_hat = nn.interpolate(x, xt, self.beta[i])
                _, grads_p = nn.gradient_penalty(critic, x_hat, cfg.lambda_gp)
                total = grads_r.add_(grads_s).add_(grads_p)
                local.append(
                    nn.split_grads(total, [len(self.d1[i].layers), len(self.d2[i].layers)])
                )
                fr, t1 = nn.forward(self.d1[i], x)
                fs, t2 = nn.forward(self.d1[i], xt)
                f_parts.append(fr)
                ft_parts.append(fs)
                tapes_fr.append(t1)
                tapes_fs.append(t2)
            f = np.hstack(f_parts)
            ft = np.hstack(ft_parts)
            out_r, tape_r = nn.forward(self.ds, f)
            out_s, tape_s = nn.forward(self.ds, ft)
            grads_r, d_f = nn.backward(self.ds, tape_r, np.full_like(out_r, -1.0 / b))
            grads_s, d_ft = nn.backward(self.ds, tape_s, np.full_like(out_s, 1.0 / b))
            f_hat = nn.interpolate(f, ft, self.beta_server)
            _, grads_p = nn.gradient_penalty(self.ds, f_hat, cfg.lambda_gp)
            ds_grads = grads_r.add_(grads_s).add_(grads_p)
            for i, sl in enumerate(self._feature_slices()):
                g_r, _ = nn.backward(self.d1[i], tapes_fr[i], d_f[:, sl])
                g_s, _ = nn.backward(self.d1[i], tapes_fs[i], d_ft[:, sl])
                flow = g_r.add_(g_s).scale_(cfg.lambda_server)
                d1_total = local[i][0].add_(flow)
                self.d1[i], self.adam_d1[i] = nn.adam_step(
                    self.d1[i], d1_total, self.adam_d1[i], cfg.eta_d
                )
                self.d2[i], self.adam_d2[i] = nn.adam_step(
                    self.d2[i], local[i][1], self.adam_d2[i], cfg.eta_d
                )
            self.ds, self.adam_ds = nn.adam_step(
                self.ds, ds_grads, self.adam_ds, cfg.eta_server
            )
        # generator iteration
        z = self.z.normal(b, cfg.latent_dim)
        xts, logits_list, tapes_g, ft_parts, tapes_f = [], [], [], [], []
        for i in range(self.m):
            logits, tape_g = nn.forward(self.g[i], z)
            xt = self.heads[i].forward(logits, self.gumbel[i])
            f_t, tape_f = nn.forward(self.d1[i], xt)
            xts.append(xt)
            logits_list.append(logits)
            tapes_g.append(tape_g)
            ft_parts.append(f_t)
            tapes_f.append(tape_f)
        ft = np.hstack(ft_parts)
        out, tape = nn.forward(self.ds, ft)
        scale = -cfg.lambda_gen_server / b
        _, d_ft = nn.backward(self.ds, tape, np.full_like(out, scale))
        for i, sl in enumerate(self._feature_slices()):
            _, d_xt = nn.backward(self.d1[i], tapes_f[i], d_ft[:, sl])
            critic = nn.stack(self.d1[i], self.d2[i])
            out_c, tape_c = nn.forward(critic, xts[i])
            _, d_local = nn.backward(critic, tape_c, np.full_like(out_c, -1.0 / b))
            d_xt = d_xt + d_local
            d_logits = self.heads[i].backward(xts[i], d_xt)
            g_grads, _ = nn.backward(self.g[i], tapes_g[i], d_logits)
            self.g[i], self.adam_g[i] = nn.adam_step(
                self.g[i], g_grads, self.adam_g[i], cfg.eta_g
            )
